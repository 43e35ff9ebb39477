#include "splatloop/io.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "splatloop/rng.hpp"

namespace splatloop {

namespace {

void put_u32(std::ostream& os, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                          static_cast<unsigned char>((x >> 8) & 0xff),
                          static_cast<unsigned char>((x >> 16) & 0xff),
                          static_cast<unsigned char>((x >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, uint32_t& x) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    x = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
        (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    return true;
}

}  // namespace

void ftc_write(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("ftc_write: cannot open " + path);
    os.write("FTC1", 4);
    for (const auto& nt : tensors) {
        put_u32(os, static_cast<uint32_t>(nt.name.size()));
        os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        const unsigned char dtype = 0, rank = static_cast<unsigned char>(nt.t.rank());
        os.write(reinterpret_cast<const char*>(&dtype), 1);
        os.write(reinterpret_cast<const char*>(&rank), 1);
        for (int d : nt.t.shape) put_u32(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(nt.t.data()),
                 static_cast<std::streamsize>(nt.t.numel() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("ftc_write: write failed for " + path);
}

std::vector<NamedTensor> ftc_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("ftc_read: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FTC1", 4) != 0)
        throw std::runtime_error("ftc_read: bad magic in " + path);
    std::vector<NamedTensor> out;
    uint32_t name_len = 0;
    while (get_u32(is, name_len)) {
        NamedTensor nt;
        nt.name.resize(name_len);
        if (!is.read(nt.name.data(), name_len))
            throw std::runtime_error("ftc_read: truncated name in " + path);
        unsigned char dtype = 0, rank = 0;
        if (!is.read(reinterpret_cast<char*>(&dtype), 1) ||
            !is.read(reinterpret_cast<char*>(&rank), 1))
            throw std::runtime_error("ftc_read: truncated header in " + path);
        if (dtype != 0) throw std::runtime_error("ftc_read: unsupported dtype in " + path);
        std::vector<int> shape(rank);
        for (int i = 0; i < rank; ++i) {
            uint32_t d;
            if (!get_u32(is, d)) throw std::runtime_error("ftc_read: truncated dims in " + path);
            shape[static_cast<size_t>(i)] = static_cast<int>(d);
        }
        nt.t = Tensor(shape);
        if (!is.read(reinterpret_cast<char*>(nt.t.data()),
                     static_cast<std::streamsize>(nt.t.numel() * sizeof(float))))
            throw std::runtime_error("ftc_read: truncated data for '" + nt.name + "' in " + path);
        out.push_back(std::move(nt));
    }
    return out;
}

const Tensor& FtcMap::get(const std::string& name) const {
    auto it = m.find(name);
    if (it == m.end()) throw std::runtime_error("FTC container missing tensor '" + name + "'");
    return it->second;
}

const Tensor* FtcMap::find(const std::string& name) const {
    auto it = m.find(name);
    return it == m.end() ? nullptr : &it->second;
}

FtcMap ftc_read_map(const std::string& path) {
    FtcMap out;
    for (auto& nt : ftc_read(path)) out.m.emplace(std::move(nt.name), std::move(nt.t));
    return out;
}

// --------------------------------------------------------------------------

static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

KvConfig KvConfig::parse_text(const std::string& text) {
    KvConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": missing '=' in '" +
                              line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        cfg.kv[key] = value;
    }
    return cfg;
}

KvConfig KvConfig::parse_file(const std::string& path) {
    return parse_text(read_text_file(path));
}

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

std::string KvConfig::require_str(const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("missing required config key '" + key + "'");
    return it->second;
}

double KvConfig::get_num(const std::string& key, double fallback) const {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        size_t pos = 0;
        double x = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + it->second + "'");
    }
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        size_t pos = 0;
        long long x = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + it->second + "'");
    }
}

uint64_t KvConfig::get_uint(const std::string& key, uint64_t fallback) const {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        size_t pos = 0;
        unsigned long long x = std::stoull(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" +
                          it->second + "'");
    }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    const std::string& s = it->second;
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + s + "'");
}

std::string KvConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

uint64_t KvConfig::hash() const { return fnv1a64(canonical()); }

void KvConfig::write_file(const std::string& path) const { write_text_file(path, canonical()); }

// --------------------------------------------------------------------------
// PNG writer. Stored (uncompressed) deflate blocks keep this dependency-free
// and byte-deterministic.
// --------------------------------------------------------------------------

namespace {

uint32_t crc32_table_entry(uint32_t n) {
    uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    return c;
}

uint32_t crc32(const unsigned char* buf, size_t len, uint32_t crc = 0) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t n = 0; n < 256; ++n) table[n] = crc32_table_entry(n);
        init = true;
    }
    uint32_t c = crc ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ buf[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

void put_be32(std::string& s, uint32_t x) {
    s.push_back(static_cast<char>((x >> 24) & 0xff));
    s.push_back(static_cast<char>((x >> 16) & 0xff));
    s.push_back(static_cast<char>((x >> 8) & 0xff));
    s.push_back(static_cast<char>(x & 0xff));
}

void put_chunk(std::ostream& os, const char type[4], const std::string& data) {
    std::string hdr;
    put_be32(hdr, static_cast<uint32_t>(data.size()));
    os.write(hdr.data(), 4);
    std::string body(type, 4);
    body += data;
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    uint32_t crc = crc32(reinterpret_cast<const unsigned char*>(body.data()), body.size());
    std::string tail;
    put_be32(tail, crc);
    os.write(tail.data(), 4);
}

}  // namespace

void png_write_rgb(const std::string& path, int width, int height, const float* rgb) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("png_write_rgb: bad size");
    // Raw scanlines with filter byte 0.
    std::string raw;
    raw.reserve(static_cast<size_t>(height) * (1 + 3 * static_cast<size_t>(width)));
    for (int y = 0; y < height; ++y) {
        raw.push_back('\0');
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                float f = rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
                f = std::min(1.0f, std::max(0.0f, f));
                raw.push_back(static_cast<char>(static_cast<int>(f * 255.0f + 0.5f)));
            }
    }

    // zlib stream with stored deflate blocks.
    std::string z;
    z.push_back(0x78);
    z.push_back(0x01);
    size_t off = 0;
    while (off < raw.size() || raw.empty()) {
        size_t n = std::min<size_t>(65535, raw.size() - off);
        bool last = (off + n == raw.size());
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<char>(n & 0xff));
        z.push_back(static_cast<char>((n >> 8) & 0xff));
        z.push_back(static_cast<char>(~n & 0xff));
        z.push_back(static_cast<char>((~n >> 8) & 0xff));
        z.append(raw, off, n);
        off += n;
        if (last) break;
    }
    // Adler-32 of the raw data.
    uint32_t a = 1, b = 0;
    for (unsigned char ch : raw) {
        a = (a + ch) % 65521u;
        b = (b + a) % 65521u;
    }
    put_be32(z, (b << 16) | a);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("png_write_rgb: cannot open " + path);
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    os.write(reinterpret_cast<const char*>(sig), 8);
    std::string ihdr;
    put_be32(ihdr, static_cast<uint32_t>(width));
    put_be32(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    put_chunk(os, "IHDR", ihdr);
    put_chunk(os, "IDAT", z);
    put_chunk(os, "IEND", "");
    if (!os) throw std::runtime_error("png_write_rgb: write failed for " + path);
}

// --------------------------------------------------------------------------

std::string tool_version() { return "splatloop-0.1.0"; }

void RunManifest::write(const std::string& path) const {
    std::ostringstream os;
    os << "command=" << command << "\n";
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(config_hash));
    os << "config_hash=" << hex << "\n";
    os << "seed=" << seed << "\n";
    os << "inputs=" << inputs << "\n";
    os << "outputs=" << outputs << "\n";
    os << "version=" << version << "\n";
    os << "wall_clock_sec=" << wall_clock_sec << "\n";
    for (const auto& [k, v] : extra) os << k << "=" << v << "\n";
    write_text_file(path, os.str());
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw std::runtime_error("cannot create directory " + path + ": " + ec.message());
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw std::runtime_error("write failed for " + path);
}

}  // namespace splatloop
