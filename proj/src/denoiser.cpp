#include "splatloop/denoiser.hpp"

namespace splatloop {

using nn::Tape;
using nn::VarId;

void MultiViewBatch::validate(int max_t, int vocab_size) const {
    const int v = view_count();
    if (v < 2) throw std::invalid_argument("MultiViewBatch: need at least 2 views");
    if (static_cast<int>(per_view_t.size()) != v)
        throw std::invalid_argument("MultiViewBatch: per_view_t size mismatch");
    if (!cameras.empty() && static_cast<int>(cameras.size()) != v)
        throw std::invalid_argument("MultiViewBatch: camera count mismatch with views");
    for (int t : per_view_t)
        if (t < 0 || t > max_t)
            throw std::invalid_argument("MultiViewBatch: timestep out of range");
    if (reference_index < 0 || reference_index >= v)
        throw std::invalid_argument("MultiViewBatch: bad reference index");
    for (const auto& ids : tokens)
        for (int id : ids)
            if (id < 0 || id >= vocab_size)
                throw std::invalid_argument("MultiViewBatch: conditioning id out of vocabulary");
}

Denoiser::Denoiser(nn::ParamStore& ps, const DenoiserConfig& cfg, Rng& rng,
                   const std::string& prefix)
    : cfg_(cfg),
      time_embed_(ps, prefix + ".temb", cfg.base_width, cfg.temb_dim(), rng),
      in_conv_(ps, prefix + ".in", cfg.channels, cfg.base_width, 3, 1, 1, rng),
      enc0_(ps, prefix + ".enc0", cfg.base_width, cfg.base_width, cfg.temb_dim(), rng),
      down0_(ps, prefix + ".down0", cfg.base_width, 2 * cfg.base_width, 3, 2, 1, rng),
      enc1_(ps, prefix + ".enc1", 2 * cfg.base_width, 2 * cfg.base_width, cfg.temb_dim(), rng),
      attn_enc1_(ps, prefix + ".attn_enc1", 2 * cfg.base_width, cfg.heads, rng),
      down1_(ps, prefix + ".down1", 2 * cfg.base_width, 4 * cfg.base_width, 3, 2, 1, rng),
      mid0_(ps, prefix + ".mid0", 4 * cfg.base_width, 4 * cfg.base_width, cfg.temb_dim(), rng),
      attn_mid_(ps, prefix + ".attn_mid", 4 * cfg.base_width, cfg.heads, rng),
      mid1_(ps, prefix + ".mid1", 4 * cfg.base_width, 4 * cfg.base_width, cfg.temb_dim(), rng),
      up1_(ps, prefix + ".up1", 4 * cfg.base_width, 2 * cfg.base_width, 3, 1, 1, rng),
      dec1_(ps, prefix + ".dec1", 4 * cfg.base_width, 2 * cfg.base_width, cfg.temb_dim(), rng),
      attn_dec1_(ps, prefix + ".attn_dec1", 2 * cfg.base_width, cfg.heads, rng),
      up0_(ps, prefix + ".up0", 2 * cfg.base_width, cfg.base_width, 3, 1, 1, rng),
      dec0_(ps, prefix + ".dec0", 2 * cfg.base_width, cfg.base_width, cfg.temb_dim(), rng),
      out_norm_(ps, prefix + ".out_norm", cfg.base_width, 8),
      out_conv_(ps, prefix + ".out", cfg.base_width, cfg.channels, 3, 1, 1, rng, 0.0) {
    cond_table_ = &ps.create(prefix + ".cond_table", [&] {
        Tensor t({cfg.vocab_size, cfg.temb_dim()});
        rng.fill_normal(t, 0.1);
        return t;
    }());
    if (cfg.image_size % 4 != 0)
        throw std::invalid_argument("denoiser image size must be divisible by 4");
}

VarId Denoiser::cond_rows(Tape& t, const std::vector<std::vector<int>>& tokens) const {
    VarId table = cond_table_->on(t);
    VarId rows = -1;
    for (const auto& ids : tokens) {
        std::vector<int> use = ids.empty() ? std::vector<int>{0} : ids;
        VarId pooled = t.rows_mean(t.embedding(table, use));  // [1, D]
        rows = rows < 0 ? pooled : t.concat(rows, pooled, 0);
    }
    return rows;  // [V, D]
}

VarId Denoiser::forward(Tape& t, VarId x, const std::vector<int>& t_vec,
                        const std::vector<std::vector<int>>& tokens, bool ref_injection,
                        int ref_index, std::vector<VarId>* features_out) const {
    const Tensor& tx = t.val(x);
    if (tx.rank() != 4 || tx.dim(1) != cfg_.channels)
        throw std::invalid_argument("denoiser forward: bad input shape");
    const int v = tx.dim(0);
    if (static_cast<int>(t_vec.size()) != v || static_cast<int>(tokens.size()) != v)
        throw std::invalid_argument("denoiser forward: per-view metadata size mismatch");

    VarId temb = t.add(time_embed_(t, t_vec), cond_rows(t, tokens));  // [V, D]

    VarId h0 = in_conv_(t, x);
    h0 = enc0_(t, h0, temb);
    VarId h1 = down0_(t, h0);
    h1 = enc1_(t, h1, temb);
    h1 = attn_enc1_(t, h1, ref_injection, ref_index);
    VarId h2 = down1_(t, h1);
    h2 = mid0_(t, h2, temb);
    h2 = attn_mid_(t, h2, ref_injection, ref_index);
    h2 = mid1_(t, h2, temb);
    if (features_out) features_out->push_back(h2);  // H/4 level

    VarId u1 = up1_(t, t.upsample2x(h2));
    u1 = dec1_(t, t.concat(u1, h1, 1), temb);
    u1 = attn_dec1_(t, u1, ref_injection, ref_index);
    if (features_out) features_out->push_back(u1);  // H/2 level

    VarId u0 = up0_(t, t.upsample2x(u1));
    u0 = dec0_(t, t.concat(u0, h0, 1), temb);
    return out_conv_(t, t.silu(out_norm_(t, u0)));
}

Tensor Denoiser::predict_noise(const MultiViewBatch& batch, const GuidanceConfig& guidance,
                               bool ref_injection, DenoiserFeatures* features) const {
    batch.validate(1 << 30, cfg_.vocab_size);
    const int v = batch.view_count();

    auto run = [&](const std::vector<std::vector<int>>& tokens, DenoiserFeatures* feats) {
        Tape tape;
        VarId x = tape.constant(batch.views);
        std::vector<VarId> feat_vars;
        VarId out = forward(tape, x, batch.per_view_t, tokens, ref_injection,
                            batch.reference_index, feats ? &feat_vars : nullptr);
        if (feats) {
            feats->levels.clear();
            const auto downs = feature_downsamples();
            for (size_t i = 0; i < feat_vars.size(); ++i)
                feats->levels.push_back({downs[i], tape.val(feat_vars[i])});
        }
        return tape.val(out);
    };

    Tensor cond = run(batch.tokens, features);
    if (guidance.scale == 1.0) return cond;
    std::vector<std::vector<int>> null_tokens(static_cast<size_t>(v),
                                              {guidance.null_conditioning});
    Tensor uncond = run(null_tokens, nullptr);
    return cfg_combine(uncond, cond, guidance.scale);
}

Tensor Denoiser::per_view_time_embed(const std::vector<int>& t_vec) const {
    Tape tape;
    return tape.val(time_embed_(tape, t_vec));
}

Tensor Denoiser::embed_conditioning(const std::vector<int>& token_ids) const {
    Tape tape;
    std::vector<int> use = token_ids.empty() ? std::vector<int>{0} : token_ids;
    for (int id : use)
        if (id < 0 || id >= cfg_.vocab_size)
            throw std::invalid_argument("embed_conditioning: unknown id " + std::to_string(id));
    return tape.val(tape.rows_mean(tape.embedding(cond_table_->on(tape), use)));
}

std::vector<int> Denoiser::feature_channels() const {
    return {4 * cfg_.base_width, 2 * cfg_.base_width};
}

}  // namespace splatloop
