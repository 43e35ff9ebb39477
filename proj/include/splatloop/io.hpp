#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "splatloop/tensor.hpp"

namespace splatloop {

// ---------------------------------------------------------------------------
// FTC flat tensor container.
// Layout: magic "FTC1", then per tensor:
//   u32 LE name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//   u32 LE dims, raw little-endian f32 data. Read until EOF.
// ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    Tensor t;
};

void ftc_write(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> ftc_read(const std::string& path);

// Convenience map view of a loaded container.
struct FtcMap {
    std::map<std::string, Tensor> m;
    const Tensor& get(const std::string& name) const;
    const Tensor* find(const std::string& name) const;
};
FtcMap ftc_read_map(const std::string& path);

// ---------------------------------------------------------------------------
// Flat key=value run config. One `key=value` per line, '#' comments,
// blank lines ignored. Values stay strings until queried.
// ---------------------------------------------------------------------------

struct KvConfig {
    std::map<std::string, std::string> kv;

    static KvConfig parse_file(const std::string& path);
    static KvConfig parse_text(const std::string& text);

    bool has(const std::string& key) const { return kv.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { kv[key] = value; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::string require_str(const std::string& key) const;
    double get_num(const std::string& key, double fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    uint64_t get_uint(const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    // Canonical serialization (sorted keys) used for hashing and manifests.
    std::string canonical() const;
    uint64_t hash() const;
    void write_file(const std::string& path) const;
};

// Thrown for malformed configs / unknown keys; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Minimal 8-bit sRGB PNG writer (stored-deflate blocks, no external deps).
// `rgb` is H*W*3 floats in [0,1]; values are clamped.
// ---------------------------------------------------------------------------
void png_write_rgb(const std::string& path, int width, int height, const float* rgb);

// ---------------------------------------------------------------------------
// Run manifests: one key=value file written next to every command's outputs.
// ---------------------------------------------------------------------------
struct RunManifest {
    std::string command;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    std::string inputs;
    std::string outputs;
    std::string version;
    double wall_clock_sec = 0.0;
    std::vector<std::pair<std::string, std::string>> extra;

    void write(const std::string& path) const;
};

std::string tool_version();

// Filesystem helpers shared by dataset/CLI code.
void ensure_dir(const std::string& path);
bool file_exists(const std::string& path);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace splatloop
