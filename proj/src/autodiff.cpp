#include "splatloop/autodiff.hpp"

#include <cmath>

#include "splatloop/kernels.hpp"

namespace splatloop::nn {

namespace {

int64_t stride_below(const std::vector<int>& shape, int axis) {
    int64_t s = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s *= shape[i];
    return s;
}

int64_t count_above(const std::vector<int>& shape, int axis) {
    int64_t s = 1;
    for (int i = 0; i < axis; ++i) s *= shape[static_cast<size_t>(i)];
    return s;
}

}  // namespace

Tape::VarId Tape::push(Tensor value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.val = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

bool Tape::any_requires(std::initializer_list<VarId> ids) const {
    for (VarId id : ids)
        if (id >= 0 && nodes_[static_cast<size_t>(id)].needs_grad) return true;
    return false;
}

Tape::VarId Tape::leaf(Tensor value, Tensor* grad_sink) {
    Node n;
    n.val = std::move(value);
    n.needs_grad = grad_sink != nullptr;
    n.sink = grad_sink;
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

Tensor& Tape::grad(VarId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_ready) {
        n.grd = Tensor(n.val.shape);
        n.grad_ready = true;
    }
    return n.grd;
}

void Tape::backward(VarId loss) {
    if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad(loss).v[0] = 1.0f;
    for (int id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || !n.grad_ready) continue;
        if (n.back) n.back();
        if (n.sink) {
            if (n.sink->numel() == 0) *n.sink = Tensor(n.val.shape);
            for (int64_t i = 0; i < n.grd.numel(); ++i)
                n.sink->v[static_cast<size_t>(i)] += n.grd.v[static_cast<size_t>(i)];
        }
    }
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------------------

Tape::VarId Tape::add(VarId a, VarId b) { return add_scaled(a, b, 1.0, 1.0); }
Tape::VarId Tape::sub(VarId a, VarId b) { return add_scaled(a, b, 1.0, -1.0); }

Tape::VarId Tape::add_scaled(VarId a, VarId b, double sa, double sb) {
    check_same_shape(val(a), val(b), "add_scaled");
    Tensor out(val(a).shape);
    const float fa = static_cast<float>(sa), fb = static_cast<float>(sb);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] =
            fa * val(a).v[static_cast<size_t>(i)] + fb * val(b).v[static_cast<size_t>(i)];
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, fa, fb] {
            const Tensor& gy = grad(id);
            if (requires_grad(a)) {
                Tensor& ga = grad(a);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    ga.v[static_cast<size_t>(i)] += fa * gy.v[static_cast<size_t>(i)];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad(b);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    gb.v[static_cast<size_t>(i)] += fb * gy.v[static_cast<size_t>(i)];
            }
        };
    return id;
}

Tape::VarId Tape::affine(VarId x, double k, double c) {
    Tensor out(val(x).shape);
    const float fk = static_cast<float>(k), fc = static_cast<float>(c);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] = fk * val(x).v[static_cast<size_t>(i)] + fc;
    const VarId id = push(std::move(out), nodes_[static_cast<size_t>(x)].needs_grad, nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, fk] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int64_t i = 0; i < gy.numel(); ++i)
                gx.v[static_cast<size_t>(i)] += fk * gy.v[static_cast<size_t>(i)];
        };
    return id;
}

Tape::VarId Tape::mul(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] =
            val(a).v[static_cast<size_t>(i)] * val(b).v[static_cast<size_t>(i)];
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id] {
            const Tensor& gy = grad(id);
            if (requires_grad(a)) {
                Tensor& ga = grad(a);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    ga.v[static_cast<size_t>(i)] +=
                        gy.v[static_cast<size_t>(i)] * val(b).v[static_cast<size_t>(i)];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad(b);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    gb.v[static_cast<size_t>(i)] +=
                        gy.v[static_cast<size_t>(i)] * val(a).v[static_cast<size_t>(i)];
            }
        };
    return id;
}

Tape::VarId Tape::silu(VarId x) {
    Tensor out(val(x).shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const float v = val(x).v[static_cast<size_t>(i)];
        out.v[static_cast<size_t>(i)] = v / (1.0f + std::exp(-v));
    }
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int64_t i = 0; i < gy.numel(); ++i) {
                const float v = val(x).v[static_cast<size_t>(i)];
                const float s = 1.0f / (1.0f + std::exp(-v));
                gx.v[static_cast<size_t>(i)] +=
                    gy.v[static_cast<size_t>(i)] * s * (1.0f + v * (1.0f - s));
            }
        };
    return id;
}

Tape::VarId Tape::sigmoid(VarId x) {
    Tensor out(val(x).shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] =
            1.0f / (1.0f + std::exp(-val(x).v[static_cast<size_t>(i)]));
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int64_t i = 0; i < gy.numel(); ++i) {
                const float y = val(id).v[static_cast<size_t>(i)];
                gx.v[static_cast<size_t>(i)] += gy.v[static_cast<size_t>(i)] * y * (1.0f - y);
            }
        };
    return id;
}

Tape::VarId Tape::tanh(VarId x) {
    Tensor out(val(x).shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] = std::tanh(val(x).v[static_cast<size_t>(i)]);
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int64_t i = 0; i < gy.numel(); ++i) {
                const float y = val(id).v[static_cast<size_t>(i)];
                gx.v[static_cast<size_t>(i)] += gy.v[static_cast<size_t>(i)] * (1.0f - y * y);
            }
        };
    return id;
}

Tape::VarId Tape::square(VarId x) { return mul(x, x); }

Tape::VarId Tape::reshape(VarId x, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != val(x).numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.v = val(x).v;
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int64_t i = 0; i < gy.numel(); ++i)
                gx.v[static_cast<size_t>(i)] += gy.v[static_cast<size_t>(i)];
        };
    return id;
}

Tape::VarId Tape::concat(VarId a, VarId b, int axis) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != tb.rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < ta.rank(); ++i)
        if (i != axis && ta.dim(i) != tb.dim(i))
            throw std::invalid_argument("concat: shape mismatch off the concat axis");
    std::vector<int> shape = ta.shape;
    shape[static_cast<size_t>(axis)] += tb.dim(axis);
    Tensor out(shape);
    const int64_t inner = stride_below(ta.shape, axis);
    const int64_t outer = count_above(ta.shape, axis);
    const int64_t block_a = ta.dim(axis) * inner;
    const int64_t block_b = tb.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(ta.v.begin() + o * block_a, block_a,
                    out.v.begin() + o * (block_a + block_b));
        std::copy_n(tb.v.begin() + o * block_b, block_b,
                    out.v.begin() + o * (block_a + block_b) + block_a);
    }
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, inner, outer, block_a, block_b] {
            const Tensor& gy = grad(id);
            (void)inner;
            if (requires_grad(a)) {
                Tensor& ga = grad(a);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < block_a; ++i)
                        ga.v[static_cast<size_t>(o * block_a + i)] +=
                            gy.v[static_cast<size_t>(o * (block_a + block_b) + i)];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad(b);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < block_b; ++i)
                        gb.v[static_cast<size_t>(o * block_b + i)] +=
                            gy.v[static_cast<size_t>(o * (block_a + block_b) + block_a + i)];
            }
        };
    return id;
}

Tape::VarId Tape::slice(VarId x, int axis, int from, int to) {
    const Tensor& tx = val(x);
    if (axis < 0 || axis >= tx.rank() || from < 0 || to > tx.dim(axis) || from >= to)
        throw std::invalid_argument("slice: bad range");
    std::vector<int> shape = tx.shape;
    shape[static_cast<size_t>(axis)] = to - from;
    Tensor out(shape);
    const int64_t inner = stride_below(tx.shape, axis);
    const int64_t outer = count_above(tx.shape, axis);
    const int64_t in_block = tx.dim(axis) * inner;
    const int64_t out_block = (to - from) * inner;
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(tx.v.begin() + o * in_block + from * inner, out_block,
                    out.v.begin() + o * out_block);
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, inner, outer, in_block, out_block,
                                                from] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < out_block; ++i)
                    gx.v[static_cast<size_t>(o * in_block + from * inner + i)] +=
                        gy.v[static_cast<size_t>(o * out_block + i)];
        };
    return id;
}

Tape::VarId Tape::transpose12(VarId x) {
    const Tensor& tx = val(x);
    if (tx.rank() != 3) throw std::invalid_argument("transpose12: expects rank-3");
    const int b = tx.dim(0), n = tx.dim(1), m = tx.dim(2);
    Tensor out({b, m, n});
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                out.v[(static_cast<size_t>(bi) * m + j) * n + i] =
                    tx.v[(static_cast<size_t>(bi) * n + i) * m + j];
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, b, n, m] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int bi = 0; bi < b; ++bi)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j)
                        gx.v[(static_cast<size_t>(bi) * n + i) * m + j] +=
                            gy.v[(static_cast<size_t>(bi) * m + j) * n + i];
        };
    return id;
}

Tape::VarId Tape::sum_all(VarId x) {
    Tensor out({1});
    double s = 0;
    for (float v : val(x).v) s += v;
    out.v[0] = static_cast<float>(s);
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id] {
            Tensor& gx = grad(x);
            const float g = grad(id).v[0];
            for (int64_t i = 0; i < gx.numel(); ++i) gx.v[static_cast<size_t>(i)] += g;
        };
    return id;
}

Tape::VarId Tape::mean_all(VarId x) {
    const double inv = 1.0 / static_cast<double>(val(x).numel());
    Tensor out({1});
    double s = 0;
    for (float v : val(x).v) s += v;
    out.v[0] = static_cast<float>(s * inv);
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, inv] {
            Tensor& gx = grad(x);
            const float g = static_cast<float>(grad(id).v[0] * inv);
            for (int64_t i = 0; i < gx.numel(); ++i) gx.v[static_cast<size_t>(i)] += g;
        };
    return id;
}

Tape::VarId Tape::mse(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "mse");
    const double inv = 1.0 / static_cast<double>(val(a).numel());
    Tensor out({1});
    double s = 0;
    for (int64_t i = 0; i < val(a).numel(); ++i) {
        const double d = static_cast<double>(val(a).v[static_cast<size_t>(i)]) -
                         val(b).v[static_cast<size_t>(i)];
        s += d * d;
    }
    out.v[0] = static_cast<float>(s * inv);
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, inv] {
            const float g = static_cast<float>(grad(id).v[0] * 2.0 * inv);
            for (int64_t i = 0; i < val(a).numel(); ++i) {
                const float d =
                    val(a).v[static_cast<size_t>(i)] - val(b).v[static_cast<size_t>(i)];
                if (requires_grad(a)) grad(a).v[static_cast<size_t>(i)] += g * d;
                if (requires_grad(b)) grad(b).v[static_cast<size_t>(i)] -= g * d;
            }
        };
    return id;
}

// ---------------------------------------------------------------------------

Tape::VarId Tape::matmul(VarId a, VarId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
        throw std::invalid_argument("matmul: bad shapes");
    const int n = ta.dim(0), k = ta.dim(1), m = tb.dim(1);
    Tensor out({n, m});
    kernels::matmul(ta.data(), tb.data(), out.data(), n, m, k, false, false, false);
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, n, k, m] {
            const Tensor& gy = grad(id);
            if (requires_grad(a))  // dA = dC * B^T
                kernels::matmul(gy.data(), val(b).data(), grad(a).data(), n, k, m, false, true,
                                true);
            if (requires_grad(b))  // dB = A^T * dC
                kernels::matmul(val(a).data(), gy.data(), grad(b).data(), k, m, n, true, false,
                                true);
        };
    return id;
}

Tape::VarId Tape::matmul_nt(VarId a, VarId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1))
        throw std::invalid_argument("matmul_nt: bad shapes");
    const int n = ta.dim(0), k = ta.dim(1), m = tb.dim(0);
    Tensor out({n, m});
    kernels::matmul(ta.data(), tb.data(), out.data(), n, m, k, false, true, false);
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, n, k, m] {
            const Tensor& gy = grad(id);
            if (requires_grad(a))  // dA = dC * B
                kernels::matmul(gy.data(), val(b).data(), grad(a).data(), n, k, m, false, false,
                                true);
            if (requires_grad(b))  // dB = dC^T * A
                kernels::matmul(gy.data(), val(a).data(), grad(b).data(), m, k, n, true, false,
                                true);
        };
    return id;
}

Tape::VarId Tape::bmm(VarId a, VarId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1))
        throw std::invalid_argument("bmm: bad shapes");
    const int bs = ta.dim(0), n = ta.dim(1), k = ta.dim(2), m = tb.dim(2);
    Tensor out({bs, n, m});
    for (int bi = 0; bi < bs; ++bi)
        kernels::matmul(ta.data() + static_cast<size_t>(bi) * n * k,
                        tb.data() + static_cast<size_t>(bi) * k * m,
                        out.data() + static_cast<size_t>(bi) * n * m, n, m, k, false, false,
                        false);
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, bs, n, k, m] {
            const Tensor& gy = grad(id);
            for (int bi = 0; bi < bs; ++bi) {
                if (requires_grad(a))
                    kernels::matmul(gy.data() + static_cast<size_t>(bi) * n * m,
                                    val(b).data() + static_cast<size_t>(bi) * k * m,
                                    grad(a).data() + static_cast<size_t>(bi) * n * k, n, k, m,
                                    false, true, true);
                if (requires_grad(b))
                    kernels::matmul(val(a).data() + static_cast<size_t>(bi) * n * k,
                                    gy.data() + static_cast<size_t>(bi) * n * m,
                                    grad(b).data() + static_cast<size_t>(bi) * k * m, k, m, n,
                                    true, false, true);
            }
        };
    return id;
}

Tape::VarId Tape::bmm_nt(VarId a, VarId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2))
        throw std::invalid_argument("bmm_nt: bad shapes");
    const int bs = ta.dim(0), n = ta.dim(1), k = ta.dim(2), m = tb.dim(1);
    Tensor out({bs, n, m});
    for (int bi = 0; bi < bs; ++bi)
        kernels::matmul(ta.data() + static_cast<size_t>(bi) * n * k,
                        tb.data() + static_cast<size_t>(bi) * m * k,
                        out.data() + static_cast<size_t>(bi) * n * m, n, m, k, false, true,
                        false);
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, bs, n, k, m] {
            const Tensor& gy = grad(id);
            for (int bi = 0; bi < bs; ++bi) {
                if (requires_grad(a))
                    kernels::matmul(gy.data() + static_cast<size_t>(bi) * n * m,
                                    val(b).data() + static_cast<size_t>(bi) * m * k,
                                    grad(a).data() + static_cast<size_t>(bi) * n * k, n, k, m,
                                    false, false, true);
                if (requires_grad(b))
                    kernels::matmul(gy.data() + static_cast<size_t>(bi) * n * m,
                                    val(a).data() + static_cast<size_t>(bi) * n * k,
                                    grad(b).data() + static_cast<size_t>(bi) * m * k, m, k, n,
                                    true, false, true);
            }
        };
    return id;
}

Tape::VarId Tape::softmax_last(VarId x) {
    const Tensor& tx = val(x);
    const int m = tx.dim(tx.rank() - 1);
    const int64_t rows = tx.numel() / m;
    Tensor out(tx.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const float* in = tx.data() + r * m;
        float* o = out.data() + r * m;
        float mx = in[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, in[j]);
        double denom = 0;
        for (int j = 0; j < m; ++j) denom += std::exp(static_cast<double>(in[j]) - mx);
        const double inv = 1.0 / denom;
        for (int j = 0; j < m; ++j)
            o[j] = static_cast<float>(std::exp(static_cast<double>(in[j]) - mx) * inv);
    }
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, rows, m] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            const Tensor& y = val(id);
            for (int64_t r = 0; r < rows; ++r) {
                double dotp = 0;
                for (int j = 0; j < m; ++j)
                    dotp += static_cast<double>(y.v[static_cast<size_t>(r * m + j)]) *
                            gy.v[static_cast<size_t>(r * m + j)];
                for (int j = 0; j < m; ++j)
                    gx.v[static_cast<size_t>(r * m + j)] += static_cast<float>(
                        y.v[static_cast<size_t>(r * m + j)] *
                        (gy.v[static_cast<size_t>(r * m + j)] - dotp));
            }
        };
    return id;
}

// ---------------------------------------------------------------------------

Tape::VarId Tape::conv2d(VarId x, VarId w, VarId bias, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    if (tx.rank() != 4 || tw.rank() != 4 || tx.dim(1) != tw.dim(1))
        throw std::invalid_argument("conv2d: bad shapes");
    const int n = tx.dim(0), ic = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
    const int oc = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
    const int oh = kernels::conv_out_dim(h, kh, stride, pad);
    const int ow = kernels::conv_out_dim(wd, kw, stride, pad);
    Tensor out({n, oc, oh, ow});
    kernels::conv2d_forward(tx.data(), tw.data(), bias >= 0 ? val(bias).data() : nullptr,
                            out.data(), n, ic, h, wd, oc, kh, kw, stride, pad);
    const bool req = any_requires({x, w, bias});
    const VarId id = push(std::move(out), req, nullptr);
    if (req)
        nodes_[static_cast<size_t>(id)].back = [this, x, w, bias, id, n, ic, h, wd, oc, kh, kw,
                                                stride, pad] {
            const Tensor& gy = grad(id);
            if (requires_grad(x))
                kernels::conv2d_dgrad(gy.data(), val(w).data(), grad(x).data(), n, ic, h, wd, oc,
                                      kh, kw, stride, pad);
            if (requires_grad(w) || (bias >= 0 && requires_grad(bias)))
                kernels::conv2d_wgrad(val(x).data(), gy.data(),
                                      requires_grad(w) ? grad(w).data() : nullptr,
                                      bias >= 0 && requires_grad(bias) ? grad(bias).data()
                                                                       : nullptr,
                                      n, ic, h, wd, oc, kh, kw, stride, pad);
        };
    return id;
}

Tape::VarId Tape::upsample2x(VarId x) {
    const Tensor& tx = val(x);
    if (tx.rank() != 4) throw std::invalid_argument("upsample2x: expects NCHW");
    const int n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    out.at4(ni, ci, y, xx) = tx.at4(ni, ci, y / 2, xx / 2);
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, n, c, h, w] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int ni = 0; ni < n; ++ni)
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < 2 * h; ++y)
                        for (int xx = 0; xx < 2 * w; ++xx)
                            gx.at4(ni, ci, y / 2, xx / 2) += gy.at4(ni, ci, y, xx);
        };
    return id;
}

Tape::VarId Tape::group_norm(VarId x, VarId gamma, VarId beta, int groups, double eps) {
    const Tensor& tx = val(x);
    if (tx.rank() != 4) throw std::invalid_argument("group_norm: expects NCHW");
    const int n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels % groups != 0");
    const int cpg = c / groups;
    const int64_t gsize = static_cast<int64_t>(cpg) * h * w;
    Tensor out(tx.shape);
    std::vector<double> means(static_cast<size_t>(n * groups));
    std::vector<double> invs(static_cast<size_t>(n * groups));
    for (int ni = 0; ni < n; ++ni)
        for (int gi = 0; gi < groups; ++gi) {
            double mean = 0;
            const int c0 = gi * cpg;
            for (int ci = c0; ci < c0 + cpg; ++ci)
                for (int i = 0; i < h * w; ++i)
                    mean += tx.v[((static_cast<size_t>(ni) * c + ci) * h * w) + i];
            mean /= static_cast<double>(gsize);
            double var = 0;
            for (int ci = c0; ci < c0 + cpg; ++ci)
                for (int i = 0; i < h * w; ++i) {
                    const double d =
                        tx.v[((static_cast<size_t>(ni) * c + ci) * h * w) + i] - mean;
                    var += d * d;
                }
            var /= static_cast<double>(gsize);
            const double inv = 1.0 / std::sqrt(var + eps);
            means[static_cast<size_t>(ni * groups + gi)] = mean;
            invs[static_cast<size_t>(ni * groups + gi)] = inv;
            for (int ci = c0; ci < c0 + cpg; ++ci) {
                const float g = val(gamma).v[static_cast<size_t>(ci)];
                const float b = val(beta).v[static_cast<size_t>(ci)];
                for (int i = 0; i < h * w; ++i) {
                    const size_t idx = ((static_cast<size_t>(ni) * c + ci) * h * w) + i;
                    out.v[idx] = static_cast<float>((tx.v[idx] - mean) * inv) * g + b;
                }
            }
        }
    const bool req = any_requires({x, gamma, beta});
    const VarId id = push(std::move(out), req, nullptr);
    if (req)
        nodes_[static_cast<size_t>(id)].back = [this, x, gamma, beta, id, n, c, h, w, groups,
                                                cpg, gsize, means, invs] {
            const Tensor& gy = grad(id);
            const Tensor& tx2 = val(x);
            for (int ni = 0; ni < n; ++ni)
                for (int gi = 0; gi < groups; ++gi) {
                    const double mean = means[static_cast<size_t>(ni * groups + gi)];
                    const double inv = invs[static_cast<size_t>(ni * groups + gi)];
                    const int c0 = gi * cpg;
                    double sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int ci = c0; ci < c0 + cpg; ++ci) {
                        const double g = val(gamma).v[static_cast<size_t>(ci)];
                        for (int i = 0; i < h * w; ++i) {
                            const size_t idx = ((static_cast<size_t>(ni) * c + ci) * h * w) + i;
                            const double xhat = (tx2.v[idx] - mean) * inv;
                            const double dxhat = gy.v[idx] * g;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    const double m = static_cast<double>(gsize);
                    for (int ci = c0; ci < c0 + cpg; ++ci) {
                        const double g = val(gamma).v[static_cast<size_t>(ci)];
                        double dgamma = 0, dbeta = 0;
                        for (int i = 0; i < h * w; ++i) {
                            const size_t idx = ((static_cast<size_t>(ni) * c + ci) * h * w) + i;
                            const double xhat = (tx2.v[idx] - mean) * inv;
                            const double dxhat = gy.v[idx] * g;
                            if (requires_grad(x))
                                grad(x).v[idx] += static_cast<float>(
                                    inv * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m));
                            dgamma += gy.v[idx] * xhat;
                            dbeta += gy.v[idx];
                        }
                        if (requires_grad(gamma))
                            grad(gamma).v[static_cast<size_t>(ci)] += static_cast<float>(dgamma);
                        if (requires_grad(beta))
                            grad(beta).v[static_cast<size_t>(ci)] += static_cast<float>(dbeta);
                    }
                }
        };
    return id;
}

Tape::VarId Tape::add_channel_vec(VarId x, VarId y) {
    const Tensor& tx = val(x);
    const Tensor& ty = val(y);
    if (tx.rank() != 4 || ty.rank() != 2 || tx.dim(0) != ty.dim(0) || tx.dim(1) != ty.dim(1))
        throw std::invalid_argument("add_channel_vec: bad shapes");
    const int n = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
    Tensor out(tx.shape);
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const float b = ty.at2(ni, ci);
            for (int i = 0; i < hw; ++i) {
                const size_t idx = (static_cast<size_t>(ni) * c + ci) * hw + i;
                out.v[idx] = tx.v[idx] + b;
            }
        }
    const VarId id = push(std::move(out), any_requires({x, y}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, y, id, n, c, hw] {
            const Tensor& gy = grad(id);
            if (requires_grad(x)) {
                Tensor& gx = grad(x);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    gx.v[static_cast<size_t>(i)] += gy.v[static_cast<size_t>(i)];
            }
            if (requires_grad(y)) {
                Tensor& gv = grad(y);
                for (int ni = 0; ni < n; ++ni)
                    for (int ci = 0; ci < c; ++ci) {
                        double s = 0;
                        for (int i = 0; i < hw; ++i)
                            s += gy.v[(static_cast<size_t>(ni) * c + ci) * hw + i];
                        gv.at2(ni, ci) += static_cast<float>(s);
                    }
            }
        };
    return id;
}

Tape::VarId Tape::add_row_vec(VarId x, VarId b) {
    const Tensor& tx = val(x);
    const Tensor& tb = val(b);
    if (tx.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tb.dim(0))
        throw std::invalid_argument("add_row_vec: bad shapes");
    const int n = tx.dim(0), d = tx.dim(1);
    Tensor out(tx.shape);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.at2(i, j) = tx.at2(i, j) + tb.v[static_cast<size_t>(j)];
    const VarId id = push(std::move(out), any_requires({x, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, b, id, n, d] {
            const Tensor& gy = grad(id);
            if (requires_grad(x)) {
                Tensor& gx = grad(x);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    gx.v[static_cast<size_t>(i)] += gy.v[static_cast<size_t>(i)];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad(b);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j)
                        gb.v[static_cast<size_t>(j)] += gy.at2(i, j);
            }
        };
    return id;
}

Tape::VarId Tape::scale_per_n(VarId x, std::vector<double> coef) {
    const Tensor& tx = val(x);
    if (tx.rank() < 1 || tx.dim(0) != static_cast<int>(coef.size()))
        throw std::invalid_argument("scale_per_n: coef size mismatch");
    const int n = tx.dim(0);
    const int64_t block = tx.numel() / n;
    Tensor out(tx.shape);
    for (int ni = 0; ni < n; ++ni) {
        const float s = static_cast<float>(coef[static_cast<size_t>(ni)]);
        for (int64_t i = 0; i < block; ++i)
            out.v[static_cast<size_t>(ni * block + i)] =
                s * tx.v[static_cast<size_t>(ni * block + i)];
    }
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, coef, n, block] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int ni = 0; ni < n; ++ni) {
                const float s = static_cast<float>(coef[static_cast<size_t>(ni)]);
                for (int64_t i = 0; i < block; ++i)
                    gx.v[static_cast<size_t>(ni * block + i)] +=
                        s * gy.v[static_cast<size_t>(ni * block + i)];
            }
        };
    return id;
}

Tape::VarId Tape::embedding(VarId table, std::vector<int> ids) {
    const Tensor& tt = val(table);
    if (tt.rank() != 2) throw std::invalid_argument("embedding: table must be [vocab, dim]");
    const int d = tt.dim(1);
    for (int i : ids)
        if (i < 0 || i >= tt.dim(0))
            throw std::invalid_argument("embedding: id " + std::to_string(i) +
                                        " out of vocabulary");
    Tensor out({static_cast<int>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(tt.v.begin() + static_cast<size_t>(ids[r]) * d, d, out.v.begin() + r * d);
    const VarId id = push(std::move(out), requires_grad(table), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, table, id, ids, d] {
            Tensor& gt = grad(table);
            const Tensor& gy = grad(id);
            for (size_t r = 0; r < ids.size(); ++r)
                for (int j = 0; j < d; ++j)
                    gt.v[static_cast<size_t>(ids[r]) * d + j] += gy.v[r * static_cast<size_t>(d) + j];
        };
    return id;
}

Tape::VarId Tape::scalar_gate(VarId x, VarId gate) {
    if (val(gate).numel() != 1) throw std::invalid_argument("scalar_gate: gate must be [1]");
    const float g = val(gate).v[0];
    Tensor out(val(x).shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] = g * val(x).v[static_cast<size_t>(i)];
    const VarId id = push(std::move(out), any_requires({x, gate}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, gate, id, g] {
            const Tensor& gy = grad(id);
            if (requires_grad(x)) {
                Tensor& gx = grad(x);
                for (int64_t i = 0; i < gy.numel(); ++i)
                    gx.v[static_cast<size_t>(i)] += g * gy.v[static_cast<size_t>(i)];
            }
            if (requires_grad(gate)) {
                double s = 0;
                for (int64_t i = 0; i < gy.numel(); ++i)
                    s += static_cast<double>(gy.v[static_cast<size_t>(i)]) *
                         val(x).v[static_cast<size_t>(i)];
                grad(gate).v[0] += static_cast<float>(s);
            }
        };
    return id;
}

Tape::VarId Tape::rows_mean(VarId x) {
    const Tensor& tx = val(x);
    if (tx.rank() != 2) throw std::invalid_argument("rows_mean: expects [n,d]");
    const int n = tx.dim(0), d = tx.dim(1);
    Tensor out({1, d});
    for (int j = 0; j < d; ++j) {
        double s = 0;
        for (int i = 0; i < n; ++i) s += tx.at2(i, j);
        out.v[static_cast<size_t>(j)] = static_cast<float>(s / n);
    }
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, n, d] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    gx.at2(i, j) += gy.v[static_cast<size_t>(j)] / static_cast<float>(n);
        };
    return id;
}

Tape::VarId Tape::normalize_rows(VarId x, double eps) {
    const Tensor& tx = val(x);
    if (tx.rank() != 2) throw std::invalid_argument("normalize_rows: expects [n,d]");
    const int n = tx.dim(0), d = tx.dim(1);
    Tensor out(tx.shape);
    std::vector<double> norms(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += static_cast<double>(tx.at2(i, j)) * tx.at2(i, j);
        const double nm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(i)] = nm;
        for (int j = 0; j < d; ++j) out.at2(i, j) = static_cast<float>(tx.at2(i, j) / nm);
    }
    const VarId id = push(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, x, id, n, d, norms] {
            Tensor& gx = grad(x);
            const Tensor& gy = grad(id);
            const Tensor& y = val(id);
            for (int i = 0; i < n; ++i) {
                double dotp = 0;
                for (int j = 0; j < d; ++j)
                    dotp += static_cast<double>(y.at2(i, j)) * gy.at2(i, j);
                for (int j = 0; j < d; ++j)
                    gx.at2(i, j) += static_cast<float>(
                        (gy.at2(i, j) - y.at2(i, j) * dotp) / norms[static_cast<size_t>(i)]);
            }
        };
    return id;
}

Tape::VarId Tape::mul_last_broadcast(VarId a, VarId b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(0) != tb.dim(0) || tb.dim(1) != 1)
        throw std::invalid_argument("mul_last_broadcast: bad shapes");
    const int n = ta.dim(0), k = ta.dim(1);
    Tensor out(ta.shape);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) out.at2(i, j) = ta.at2(i, j) * tb.at2(i, 0);
    const VarId id = push(std::move(out), any_requires({a, b}), nullptr);
    if (nodes_[static_cast<size_t>(id)].needs_grad)
        nodes_[static_cast<size_t>(id)].back = [this, a, b, id, n, k] {
            const Tensor& gy = grad(id);
            for (int i = 0; i < n; ++i) {
                if (requires_grad(a))
                    for (int j = 0; j < k; ++j)
                        grad(a).at2(i, j) += gy.at2(i, j) * val(b).at2(i, 0);
                if (requires_grad(b)) {
                    double s = 0;
                    for (int j = 0; j < k; ++j)
                        s += static_cast<double>(gy.at2(i, j)) * val(a).at2(i, j);
                    grad(b).at2(i, 0) += static_cast<float>(s);
                }
            }
        };
    return id;
}

Tape::VarId Tape::render_splats(VarId positions, VarId scales, VarId rotations, VarId opacities,
                                VarId colors, const CameraPose& cam, const Vec3& background,
                                const RenderSettings& settings) {
    GaussianCloud cloud;
    cloud.positions = val(positions);
    cloud.scales = val(scales);
    cloud.rotations = val(rotations);
    cloud.opacities = val(opacities);
    cloud.colors = val(colors);
    RenderOutput ro = render(cloud, cam, background, settings);
    const int h = cam.height, w = cam.width;
    Tensor out({4, h, w});
    std::copy_n(ro.image.v.begin(), static_cast<size_t>(3 * h * w), out.v.begin());
    std::copy_n(ro.alpha_mask.v.begin(), static_cast<size_t>(h * w),
                out.v.begin() + static_cast<size_t>(3 * h * w));
    const bool req = any_requires({positions, scales, rotations, opacities, colors});
    const VarId id = push(std::move(out), req, nullptr);
    if (req)
        nodes_[static_cast<size_t>(id)].back = [this, positions, scales, rotations, opacities,
                                                colors, cam, background, settings, id, h, w] {
            const Tensor& gy = grad(id);
            Tensor gi({3, h, w}), gm({h, w});
            std::copy_n(gy.v.begin(), static_cast<size_t>(3 * h * w), gi.v.begin());
            std::copy_n(gy.v.begin() + static_cast<size_t>(3 * h * w),
                        static_cast<size_t>(h * w), gm.v.begin());
            GaussianCloud cloud2;
            cloud2.positions = val(positions);
            cloud2.scales = val(scales);
            cloud2.rotations = val(rotations);
            cloud2.opacities = val(opacities);
            cloud2.colors = val(colors);
            CloudGrads grads = CloudGrads::zeros_like(cloud2);
            render_backward(cloud2, cam, background, settings, gi, gm, grads);
            auto acc = [this](VarId dst, const Tensor& src) {
                if (dst < 0 || !requires_grad(dst)) return;
                Tensor& g = grad(dst);
                for (int64_t i = 0; i < src.numel(); ++i)
                    g.v[static_cast<size_t>(i)] += src.v[static_cast<size_t>(i)];
            };
            acc(positions, grads.positions);
            acc(scales, grads.scales);
            acc(rotations, grads.rotations);
            acc(opacities, grads.opacities);
            acc(colors, grads.colors);
        };
    return id;
}

}  // namespace splatloop::nn
