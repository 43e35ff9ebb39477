#pragma once

#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "splatloop/autodiff.hpp"
#include "splatloop/rng.hpp"

namespace splatloop::nn {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor opt_m, opt_v;  // AdamW moments
    bool frozen = false;

    VarId on(Tape& tape) const {
        return tape.leaf(value, frozen ? nullptr : &const_cast<Param*>(this)->grad);
    }
    void zero_grad() {
        if (grad.numel()) std::fill(grad.v.begin(), grad.v.end(), 0.0f);
    }
};

// Owns every parameter of a model; deque keeps Param* stable.
class ParamStore {
  public:
    Param& create(const std::string& name, Tensor init);
    Param* find(const std::string& name);
    std::vector<Param*> all();
    std::vector<Param*> trainable();
    void zero_grads();
    void set_frozen(const std::string& prefix, bool frozen);
    int64_t total_numel() const;

    // Checkpointing. Optimizer moments ride along under "opt.*" names so a
    // resumed run continues where it stopped.
    void save_ftc(const std::string& path, bool include_opt_state = true,
                  int64_t opt_step = 0) const;
    // Strict by name and shape; returns the stored optimizer step (0 if none).
    int64_t load_ftc(const std::string& path);

  private:
    std::deque<Param> params_;
};

// Weight initializers draw from one Rng in construction order, so a fixed
// seed gives bit-identical models.
Tensor kaiming_conv_init(Rng& rng, int oc, int ic, int kh, int kw);
Tensor linear_init(Rng& rng, int out_dim, int in_dim);

struct Conv2d {
    Param* w = nullptr;
    Param* b = nullptr;
    int stride = 1, pad = 1;
    Conv2d() = default;
    // init_scale 0 gives an exactly-zero layer.
    Conv2d(ParamStore& ps, const std::string& name, int ic, int oc, int k, int stride, int pad,
           Rng& rng, double init_scale = 1.0);
    VarId operator()(Tape& t, VarId x) const { return t.conv2d(x, w->on(t), b->on(t), stride, pad); }
};

struct Linear {
    Param* w = nullptr;  // [out, in]
    Param* b = nullptr;  // [out]
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
           double init_scale = 1.0);
    VarId operator()(Tape& t, VarId x) const {  // x [n, in]
        return t.add_row_vec(t.matmul_nt(x, w->on(t)), b->on(t));
    }
};

struct GroupNorm {
    Param* gamma = nullptr;
    Param* beta = nullptr;
    int groups = 8;
    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups);
    VarId operator()(Tape& t, VarId x) const {
        return t.group_norm(x, gamma->on(t), beta->on(t), groups);
    }
};

// Spatial self-attention over one view's pixels, optionally attending over
// concatenated key/value tokens from a reference view (same projection
// weights, same forward pass) or jointly over all views' tokens.
struct SelfAttention2d {
    GroupNorm norm;
    Conv2d qkv;   // 1x1, C -> 3C
    Conv2d proj;  // 1x1, C -> C
    int heads = 4;
    int channels = 0;

    SelfAttention2d() = default;
    SelfAttention2d(ParamStore& ps, const std::string& name, int channels, int heads, Rng& rng);

    // x: [V,C,H,W]. When ref_injection is set, every view except ref_index
    // attends over its own tokens plus the reference view's tokens. When
    // joint is set, all views' tokens form one sequence (and ref_injection
    // is ignored).
    VarId operator()(Tape& t, VarId x, bool ref_injection = false, int ref_index = 0,
                     bool joint = false) const;
};

// Zero-gated cross-attention: queries from x, keys/values from a feature map
// of a different network. The scalar gate starts at exactly 0 so the block
// is the identity at initialization.
struct CrossAttention2d {
    GroupNorm norm;
    Conv2d q_proj;   // 1x1, C -> C
    Conv2d kv_proj;  // 1x1, Cf -> 2C
    Conv2d proj;     // 1x1, C -> C
    Param* gate = nullptr;
    int heads = 4;
    int channels = 0;

    CrossAttention2d() = default;
    CrossAttention2d(ParamStore& ps, const std::string& name, int channels, int feat_channels,
                     int heads, Rng& rng);

    // x: [V,C,H,W], features: [V,Cf,hf,wf]; each view attends to its own
    // feature map.
    VarId operator()(Tape& t, VarId x, VarId features) const;
};

struct ResBlock {
    GroupNorm gn1, gn2;
    Conv2d conv1, conv2;
    Linear temb_proj;
    Conv2d skip;  // 1x1, only when ic != oc
    bool has_skip = false;
    bool has_temb = false;

    ResBlock() = default;
    // zero_init_temb makes the timestep projection exactly zero at init.
    ResBlock(ParamStore& ps, const std::string& name, int ic, int oc, int temb_dim, Rng& rng,
             bool zero_init_temb = false);

    // temb: [N, temb_dim] or -1 when the block is time-unconditioned.
    VarId operator()(Tape& t, VarId x, VarId temb = -1) const;
};

// Sinusoidal embedding rows for a vector of timesteps.
Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int dim);

struct TimeEmbed {
    Linear l1, l2;
    int dim = 0, out_dim = 0;
    TimeEmbed() = default;
    TimeEmbed(ParamStore& ps, const std::string& name, int sin_dim, int out_dim, Rng& rng);
    VarId operator()(Tape& t, const std::vector<int>& timesteps) const;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

struct GradStepStats {
    double grad_norm = 0.0;  // pre-clip global norm
    bool clipped = false;
};

class AdamW {
  public:
    AdamWConfig cfg;
    int64_t step_count = 0;

    explicit AdamW(AdamWConfig cfg = {}) : cfg(cfg) {}
    // Clips the global gradient norm to clip_norm (if > 0), applies the
    // update to every non-frozen param, and zeroes their gradients.
    GradStepStats step(const std::vector<Param*>& params, double clip_norm);
};

}  // namespace splatloop::nn
