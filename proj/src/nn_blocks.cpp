#include "splatloop/nn_blocks.hpp"

#include <cmath>

#include "splatloop/io.hpp"

namespace splatloop::nn {

Param& ParamStore::create(const std::string& name, Tensor init) {
    for (const Param& p : params_)
        if (p.name == name) throw std::invalid_argument("duplicate parameter name " + name);
    Param p;
    p.name = name;
    p.value = std::move(init);
    p.grad = Tensor(p.value.shape);
    params_.push_back(std::move(p));
    return params_.back();
}

Param* ParamStore::find(const std::string& name) {
    for (Param& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    for (Param& p : params_) out.push_back(&p);
    return out;
}

std::vector<Param*> ParamStore::trainable() {
    std::vector<Param*> out;
    for (Param& p : params_)
        if (!p.frozen) out.push_back(&p);
    return out;
}

void ParamStore::zero_grads() {
    for (Param& p : params_) p.zero_grad();
}

void ParamStore::set_frozen(const std::string& prefix, bool frozen) {
    for (Param& p : params_)
        if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
}

int64_t ParamStore::total_numel() const {
    int64_t n = 0;
    for (const Param& p : params_) n += p.value.numel();
    return n;
}

void ParamStore::save_ftc(const std::string& path, bool include_opt_state,
                          int64_t opt_step) const {
    std::vector<NamedTensor> tensors;
    for (const Param& p : params_) tensors.push_back({p.name, p.value});
    if (include_opt_state) {
        for (const Param& p : params_) {
            if (p.opt_m.numel()) tensors.push_back({"opt.m." + p.name, p.opt_m});
            if (p.opt_v.numel()) tensors.push_back({"opt.v." + p.name, p.opt_v});
        }
        Tensor step({1});
        step.v[0] = static_cast<float>(opt_step);
        tensors.push_back({"opt.step", step});
    }
    ftc_write(path, tensors);
}

int64_t ParamStore::load_ftc(const std::string& path) {
    FtcMap m = ftc_read_map(path);
    for (Param& p : params_) {
        const Tensor* t = m.find(p.name);
        if (!t)
            throw ConfigError("checkpoint " + path + " is missing parameter '" + p.name +
                              "' (architecture/config mismatch)");
        if (t->shape != p.value.shape)
            throw ConfigError("checkpoint " + path + ": parameter '" + p.name +
                                     "' has shape " + shape_str(t->shape) + ", model expects " +
                                     shape_str(p.value.shape) +
                                     " (architecture/config mismatch)");
        p.value = *t;
        if (const Tensor* om = m.find("opt.m." + p.name)) p.opt_m = *om;
        if (const Tensor* ov = m.find("opt.v." + p.name)) p.opt_v = *ov;
    }
    if (const Tensor* s = m.find("opt.step")) return static_cast<int64_t>(s->v[0]);
    return 0;
}

Tensor kaiming_conv_init(Rng& rng, int oc, int ic, int kh, int kw) {
    Tensor t({oc, ic, kh, kw});
    const double std = std::sqrt(2.0 / (static_cast<double>(ic) * kh * kw));
    rng.fill_normal(t, std);
    return t;
}

Tensor linear_init(Rng& rng, int out_dim, int in_dim) {
    Tensor t({out_dim, in_dim});
    rng.fill_normal(t, std::sqrt(1.0 / in_dim));
    return t;
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int ic, int oc, int k, int stride,
               int pad, Rng& rng, double init_scale)
    : stride(stride), pad(pad) {
    Tensor wt = kaiming_conv_init(rng, oc, ic, k, k);
    for (auto& x : wt.v) x = static_cast<float>(x * init_scale);
    w = &ps.create(name + ".w", std::move(wt));
    b = &ps.create(name + ".b", Tensor({oc}));
}

Linear::Linear(ParamStore& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
               double init_scale) {
    Tensor wt = linear_init(rng, out_dim, in_dim);
    for (auto& x : wt.v) x = static_cast<float>(x * init_scale);
    w = &ps.create(name + ".w", std::move(wt));
    b = &ps.create(name + ".b", Tensor({out_dim}));
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups)
    : groups(std::min(groups, channels)) {
    while (channels % this->groups != 0) --this->groups;
    gamma = &ps.create(name + ".gamma", Tensor::full({channels}, 1.0f));
    beta = &ps.create(name + ".beta", Tensor({channels}));
}

SelfAttention2d::SelfAttention2d(ParamStore& ps, const std::string& name, int channels,
                                 int heads, Rng& rng)
    : norm(ps, name + ".norm", channels, 8),
      qkv(ps, name + ".qkv", channels, 3 * channels, 1, 1, 0, rng),
      proj(ps, name + ".proj", channels, channels, 1, 1, 0, rng, 0.2),
      heads(heads),
      channels(channels) {
    if (channels % heads != 0)
        throw std::invalid_argument("attention channels must divide heads");
}

namespace {

// [1,C,H,W] slice -> [heads, M, dh]
VarId tokens_from_map(Tape& t, VarId x, int channels, int heads) {
    const Tensor& tx = t.val(x);
    const int m = tx.dim(2) * tx.dim(3);
    const int dh = channels / heads;
    return t.transpose12(t.reshape(x, {heads, dh, m}));
}

VarId attention_core(Tape& t, VarId q, VarId k, VarId v, int dh) {
    VarId att = t.softmax_last(t.affine(t.bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)),
                                        0.0));
    return t.bmm(att, v);  // [heads, M, dh]
}

}  // namespace

VarId SelfAttention2d::operator()(Tape& t, VarId x, bool ref_injection, int ref_index,
                                  bool joint) const {
    const Tensor& tx = t.val(x);
    const int views = tx.dim(0), h = tx.dim(2), w = tx.dim(3);
    const int dh = channels / heads;
    VarId qkv_all = qkv(t, norm(t, x));  // [V, 3C, H, W]

    std::vector<VarId> q_tok(static_cast<size_t>(views)), k_tok(static_cast<size_t>(views)),
        v_tok(static_cast<size_t>(views));
    for (int vi = 0; vi < views; ++vi) {
        VarId row = t.slice(qkv_all, 0, vi, vi + 1);  // [1, 3C, H, W]
        q_tok[static_cast<size_t>(vi)] =
            tokens_from_map(t, t.slice(row, 1, 0, channels), channels, heads);
        k_tok[static_cast<size_t>(vi)] =
            tokens_from_map(t, t.slice(row, 1, channels, 2 * channels), channels, heads);
        v_tok[static_cast<size_t>(vi)] =
            tokens_from_map(t, t.slice(row, 1, 2 * channels, 3 * channels), channels, heads);
    }

    std::vector<VarId> outs;
    if (joint) {
        VarId kj = k_tok[0], vj = v_tok[0];
        for (int vi = 1; vi < views; ++vi) {
            kj = t.concat(kj, k_tok[static_cast<size_t>(vi)], 1);
            vj = t.concat(vj, v_tok[static_cast<size_t>(vi)], 1);
        }
        for (int vi = 0; vi < views; ++vi) {
            VarId o = attention_core(t, q_tok[static_cast<size_t>(vi)], kj, vj, dh);
            outs.push_back(t.reshape(t.transpose12(o), {1, channels, h, w}));
        }
    } else {
        for (int vi = 0; vi < views; ++vi) {
            VarId k = k_tok[static_cast<size_t>(vi)];
            VarId v = v_tok[static_cast<size_t>(vi)];
            if (ref_injection && vi != ref_index) {
                k = t.concat(k, k_tok[static_cast<size_t>(ref_index)], 1);
                v = t.concat(v, v_tok[static_cast<size_t>(ref_index)], 1);
            }
            VarId o = attention_core(t, q_tok[static_cast<size_t>(vi)], k, v, dh);
            outs.push_back(t.reshape(t.transpose12(o), {1, channels, h, w}));
        }
    }
    VarId merged = outs[0];
    for (size_t i = 1; i < outs.size(); ++i) merged = t.concat(merged, outs[i], 0);
    return t.add(x, proj(t, merged));
}

CrossAttention2d::CrossAttention2d(ParamStore& ps, const std::string& name, int channels,
                                   int feat_channels, int heads, Rng& rng)
    : norm(ps, name + ".norm", channels, 8),
      q_proj(ps, name + ".q", channels, channels, 1, 1, 0, rng),
      kv_proj(ps, name + ".kv", feat_channels, 2 * channels, 1, 1, 0, rng),
      proj(ps, name + ".proj", channels, channels, 1, 1, 0, rng, 0.2),
      heads(heads),
      channels(channels) {
    gate = &ps.create(name + ".gate", Tensor({1}));  // exactly zero at init
}

VarId CrossAttention2d::operator()(Tape& t, VarId x, VarId features) const {
    const Tensor& tx = t.val(x);
    const Tensor& tf = t.val(features);
    if (tx.dim(0) != tf.dim(0))
        throw std::invalid_argument("cross-attention: view count mismatch with features");
    const int views = tx.dim(0), h = tx.dim(2), w = tx.dim(3);
    const int dh = channels / heads;
    VarId q_all = q_proj(t, norm(t, x));
    VarId kv_all = kv_proj(t, features);
    std::vector<VarId> outs;
    for (int vi = 0; vi < views; ++vi) {
        VarId q = tokens_from_map(t, t.slice(q_all, 0, vi, vi + 1), channels, heads);
        VarId kv_row = t.slice(kv_all, 0, vi, vi + 1);
        VarId k = tokens_from_map(t, t.slice(kv_row, 1, 0, channels), channels, heads);
        VarId v = tokens_from_map(t, t.slice(kv_row, 1, channels, 2 * channels), channels, heads);
        VarId o = attention_core(t, q, k, v, dh);
        outs.push_back(t.reshape(t.transpose12(o), {1, channels, h, w}));
    }
    VarId merged = outs[0];
    for (size_t i = 1; i < outs.size(); ++i) merged = t.concat(merged, outs[i], 0);
    return t.add(x, t.scalar_gate(proj(t, merged), gate->on(t)));
}

ResBlock::ResBlock(ParamStore& ps, const std::string& name, int ic, int oc, int temb_dim,
                   Rng& rng, bool zero_init_temb)
    : gn1(ps, name + ".gn1", ic, 8),
      gn2(ps, name + ".gn2", oc, 8),
      conv1(ps, name + ".conv1", ic, oc, 3, 1, 1, rng),
      // conv2 keeps a small but nonzero init so gradients reach the
      // zero-initialized timestep projections on the very first step.
      conv2(ps, name + ".conv2", oc, oc, 3, 1, 1, rng, 0.2) {
    if (temb_dim > 0) {
        temb_proj = Linear(ps, name + ".temb", temb_dim, oc, rng, zero_init_temb ? 0.0 : 1.0);
        has_temb = true;
    }
    if (ic != oc) {
        skip = Conv2d(ps, name + ".skip", ic, oc, 1, 1, 0, rng);
        has_skip = true;
    }
}

VarId ResBlock::operator()(Tape& t, VarId x, VarId temb) const {
    VarId h = conv1(t, t.silu(gn1(t, x)));
    if (temb >= 0 && has_temb) h = t.add_channel_vec(h, temb_proj(t, t.silu(temb)));
    h = conv2(t, t.silu(gn2(t, h)));
    VarId base = has_skip ? skip(t, x) : x;
    return t.add(base, h);
}

Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int dim) {
    const int half = dim / 2;
    Tensor out({static_cast<int>(timesteps.size()), dim});
    for (size_t r = 0; r < timesteps.size(); ++r)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            out.at2(static_cast<int>(r), i) =
                static_cast<float>(std::sin(timesteps[r] * freq));
            out.at2(static_cast<int>(r), half + i) =
                static_cast<float>(std::cos(timesteps[r] * freq));
        }
    return out;
}

TimeEmbed::TimeEmbed(ParamStore& ps, const std::string& name, int sin_dim, int out_dim, Rng& rng)
    : l1(ps, name + ".l1", sin_dim, out_dim, rng),
      l2(ps, name + ".l2", out_dim, out_dim, rng),
      dim(sin_dim),
      out_dim(out_dim) {}

VarId TimeEmbed::operator()(Tape& t, const std::vector<int>& timesteps) const {
    VarId sin_emb = t.constant(sinusoidal_embedding(timesteps, dim));
    return l2(t, t.silu(l1(t, sin_emb)));
}

GradStepStats AdamW::step(const std::vector<Param*>& params, double clip_norm) {
    GradStepStats stats;
    double norm2 = 0;
    for (Param* p : params) {
        if (p->frozen) continue;
        for (float g : p->grad.v) norm2 += static_cast<double>(g) * g;
    }
    stats.grad_norm = std::sqrt(norm2);
    double scale = 1.0;
    if (clip_norm > 0 && stats.grad_norm > clip_norm) {
        scale = clip_norm / stats.grad_norm;
        stats.clipped = true;
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (Param* p : params) {
        if (p->frozen) continue;
        if (!p->opt_m.numel()) {
            p->opt_m = Tensor(p->value.shape);
            p->opt_v = Tensor(p->value.shape);
        }
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const size_t si = static_cast<size_t>(i);
            const double g = static_cast<double>(p->grad.v[si]) * scale;
            const double m = cfg.beta1 * p->opt_m.v[si] + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * p->opt_v.v[si] + (1.0 - cfg.beta2) * g * g;
            p->opt_m.v[si] = static_cast<float>(m);
            p->opt_v.v[si] = static_cast<float>(v);
            const double mh = m / bc1, vh = v / bc2;
            p->value.v[si] = static_cast<float>(
                p->value.v[si] -
                cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p->value.v[si]));
        }
        p->zero_grad();
    }
    return stats;
}

}  // namespace splatloop::nn
