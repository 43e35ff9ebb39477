#pragma once

#include <functional>
#include <vector>

#include "splatloop/gsplat.hpp"
#include "splatloop/tensor.hpp"

namespace splatloop::nn {

// Define-by-run reverse-mode tape. Nodes are created in topological order,
// so backward() is a reverse sweep over creation order. Values and
// gradients are float; per-element arithmetic runs in float with double
// coefficients where it matters. Gradients only flow into inputs whose
// subgraph contains a gradient sink, so frozen networks cost no backward
// work.
class Tape {
  public:
    using VarId = int;

    VarId leaf(Tensor value, Tensor* grad_sink = nullptr);
    VarId constant(Tensor value) { return leaf(std::move(value), nullptr); }

    const Tensor& val(VarId id) const { return nodes_[static_cast<size_t>(id)].val; }
    Tensor& grad(VarId id);
    bool requires_grad(VarId id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    // elementwise / broadcast
    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId mul(VarId a, VarId b);
    VarId add_scaled(VarId a, VarId b, double sa, double sb);  // sa*a + sb*b
    VarId affine(VarId x, double k, double c);                 // k*x + c
    VarId silu(VarId x);
    VarId sigmoid(VarId x);
    VarId tanh(VarId x);
    VarId square(VarId x);

    // structure
    VarId reshape(VarId x, std::vector<int> shape);
    VarId concat(VarId a, VarId b, int axis);
    VarId slice(VarId x, int axis, int from, int to);
    VarId transpose12(VarId x);  // [B,n,m] -> [B,m,n]

    // reductions
    VarId sum_all(VarId x);
    VarId mean_all(VarId x);
    VarId mse(VarId a, VarId b);  // mean squared difference

    // linear algebra
    VarId matmul(VarId a, VarId b);     // [n,k] x [k,m]
    VarId matmul_nt(VarId a, VarId b);  // [n,k] x [m,k]^T
    VarId bmm(VarId a, VarId b);        // [B,n,k] x [B,k,m]
    VarId bmm_nt(VarId a, VarId b);     // [B,n,k] x [B,m,k]^T
    VarId softmax_last(VarId x);

    // nn building blocks
    VarId conv2d(VarId x, VarId w, VarId bias, int stride, int pad);  // bias may be -1
    VarId upsample2x(VarId x);
    VarId group_norm(VarId x, VarId gamma, VarId beta, int groups, double eps = 1e-5);
    VarId add_channel_vec(VarId x, VarId y);    // [N,C,H,W] + [N,C]
    VarId add_row_vec(VarId x, VarId b);        // [n,d] + [d]
    VarId scale_per_n(VarId x, std::vector<double> coef);  // per-batch-entry scale
    VarId embedding(VarId table, std::vector<int> ids);
    VarId scalar_gate(VarId x, VarId gate);     // x * gate[0], gate shape [1]
    VarId rows_mean(VarId x);                   // [n,d] -> [1,d]
    VarId normalize_rows(VarId x, double eps = 1e-12);
    VarId mul_last_broadcast(VarId a, VarId b);  // [n,k] * [n,1]

    // differentiable splat render: output [4,H,W] = rgb rows + alpha mask
    VarId render_splats(VarId positions, VarId scales, VarId rotations, VarId opacities,
                        VarId colors, const CameraPose& cam, const Vec3& background,
                        const RenderSettings& settings);

    void backward(VarId loss);
    void clear();
    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor val;
        Tensor grd;
        bool needs_grad = false;
        bool grad_ready = false;
        Tensor* sink = nullptr;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;

    VarId push(Tensor value, bool needs_grad, std::function<void()> back);
    bool any_requires(std::initializer_list<VarId> ids) const;
};

using VarId = Tape::VarId;

}  // namespace splatloop::nn
