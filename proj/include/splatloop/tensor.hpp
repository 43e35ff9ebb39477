#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace splatloop {

// Dense row-major float32 tensor. Rank is dynamic; everything in this
// project is rank 1..4. Shapes are small, so std::vector<int> is fine.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("negative tensor dim");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor from_vec(std::vector<int> s, std::vector<float> data) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<int64_t>(data.size()) != numel_of(t.shape))
            throw std::invalid_argument("from_vec: size mismatch");
        t.v = std::move(data);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    float* data() { return v.data(); }
    const float* data() const { return v.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // [N,C,H,W] accessor; also usable for [C,H,W] with n=0 and N=1 layout.
    float& at4(int n, int c, int y, int x) {
        const int C = shape[1], H = shape[2], W = shape[3];
        return v[((static_cast<size_t>(n) * C + c) * H + y) * W + x];
    }
    float at4(int n, int c, int y, int x) const {
        const int C = shape[1], H = shape[2], W = shape[3];
        return v[((static_cast<size_t>(n) * C + c) * H + y) * W + x];
    }

    float& at2(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
    float at2(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace splatloop
