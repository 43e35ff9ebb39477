#include "splatloop/reconstructor.hpp"

namespace splatloop {

using nn::Tape;
using nn::VarId;

Reconstructor::Reconstructor(nn::ParamStore& ps, const ReconstructorConfig& cfg, Rng& rng,
                             const std::string& prefix)
    : cfg_(cfg),
      time_embed_(ps, prefix + ".temb", cfg.base_width, cfg.temb_dim(), rng),
      in_conv_(ps, prefix + ".in", 9, cfg.base_width, 3, 1, 1, rng),
      enc0_(ps, prefix + ".enc0", cfg.base_width, cfg.base_width, cfg.temb_dim(), rng,
            /*zero_init_temb=*/true),
      down0_(ps, prefix + ".down0", cfg.base_width, 2 * cfg.base_width, 3, 2, 1, rng),
      enc1_(ps, prefix + ".enc1", 2 * cfg.base_width, 2 * cfg.base_width, cfg.temb_dim(), rng,
            true),
      cross1_(ps, prefix + ".cross1", 2 * cfg.base_width, cfg.feat_channels.at(1), cfg.heads,
              rng),
      down1_(ps, prefix + ".down1", 2 * cfg.base_width, 4 * cfg.base_width, 3, 2, 1, rng),
      enc2_(ps, prefix + ".enc2", 4 * cfg.base_width, 4 * cfg.base_width, cfg.temb_dim(), rng,
            true),
      cross2_(ps, prefix + ".cross2", 4 * cfg.base_width, cfg.feat_channels.at(0), cfg.heads,
              rng),
      joint_attn_(ps, prefix + ".joint_attn", 4 * cfg.base_width, cfg.heads, rng),
      mid_(ps, prefix + ".mid", 4 * cfg.base_width, 4 * cfg.base_width, cfg.temb_dim(), rng,
           true),
      up1_(ps, prefix + ".up1", 4 * cfg.base_width, 2 * cfg.base_width, 3, 1, 1, rng),
      dec1_(ps, prefix + ".dec1", 4 * cfg.base_width, 2 * cfg.base_width, cfg.temb_dim(), rng,
            true),
      out_norm_(ps, prefix + ".out_norm", 2 * cfg.base_width, 8),
      head_(ps, prefix + ".head", 2 * cfg.base_width, 15, 3, 1, 1, rng, 0.05) {
    if (cfg.input_size % 4 != 0)
        throw std::invalid_argument("reconstructor input size must be divisible by 4");
}

CloudVars activate_gaussians(Tape& t, VarId raw_view, const CameraPose& cam,
                             const ReconstructorConfig& cfg) {
    const Tensor& tv = t.val(raw_view);
    if (tv.rank() != 4 || tv.dim(0) != 1 || tv.dim(1) != 15)
        throw std::invalid_argument("activate_gaussians: expects [1,15,h,w]");
    const int h = tv.dim(2), w = tv.dim(3);
    const int m = h * w;

    Tensor origins, dirs;
    ray_grid(cam, h, w, origins, dirs);

    // [1,15,h,w] -> [m,15]
    VarId grid = t.transpose12(t.reshape(raw_view, {1, 15, m}));
    grid = t.reshape(grid, {m, 15});

    VarId depth_raw = t.slice(grid, 1, 0, 1);
    VarId offset_raw = t.slice(grid, 1, 1, 4);
    VarId scale_raw = t.slice(grid, 1, 4, 7);
    VarId rot_raw = t.slice(grid, 1, 7, 11);
    VarId opa_raw = t.slice(grid, 1, 11, 12);
    VarId col_raw = t.slice(grid, 1, 12, 15);

    VarId depth = t.affine(t.sigmoid(depth_raw), cfg.depth_far - cfg.depth_near, cfg.depth_near);
    VarId along = t.mul_last_broadcast(t.constant(dirs), depth);
    VarId offset = t.affine(t.tanh(offset_raw), cfg.offset_scale, 0.0);

    CloudVars out;
    out.positions = t.add(t.add(t.constant(origins), along), offset);
    out.scales = t.affine(t.sigmoid(scale_raw), cfg.scale_max - cfg.scale_min, cfg.scale_min);
    Tensor identity_bias({m, 4});
    for (int i = 0; i < m; ++i) identity_bias.at2(i, 0) = 1.0f;
    out.rotations = t.normalize_rows(t.add(rot_raw, t.constant(identity_bias)));
    out.opacities = t.reshape(t.sigmoid(opa_raw), {m});
    out.colors = t.sigmoid(col_raw);
    return out;
}

CloudVars Reconstructor::forward(Tape& t, VarId views, const std::vector<CameraPose>& cameras,
                                 const std::vector<int>& t_vec,
                                 const std::vector<VarId>& features) const {
    const Tensor& tv = t.val(views);
    if (tv.rank() != 4 || tv.dim(1) != 3)
        throw std::invalid_argument("reconstruct: expects [V,3,H,W] views");
    const int v = tv.dim(0), h = tv.dim(2), w = tv.dim(3);
    if (static_cast<int>(cameras.size()) != v)
        throw std::invalid_argument("reconstruct: camera count mismatch with views");
    if (static_cast<int>(t_vec.size()) != v)
        throw std::invalid_argument("reconstruct: timestep count mismatch with views");
    if (!features.empty() && features.size() != 2)
        throw std::invalid_argument("reconstruct: expected 2 feature levels");
    if (!features.empty()) {
        const Tensor& f2 = t.val(features[0]);
        const Tensor& f1 = t.val(features[1]);
        if (f2.dim(2) != h / 4 || f1.dim(2) != h / 2)
            throw std::invalid_argument(
                "reconstruct: feature resolution incompatible with injection sites");
    }

    // Per-view input: RGB + 6-channel Pluecker ray map.
    VarId x = -1;
    for (int vi = 0; vi < v; ++vi) {
        VarId rgb = t.slice(views, 0, vi, vi + 1);
        Tensor pl = plucker_ray_map(cameras[static_cast<size_t>(vi)], h, w);
        VarId row = t.concat(rgb, t.reshape(t.constant(pl), {1, 6, h, w}), 1);
        x = x < 0 ? row : t.concat(x, row, 0);
    }

    VarId temb = time_embed_(t, t_vec);  // [V, D]

    VarId h0 = in_conv_(t, x);
    h0 = enc0_(t, h0, temb);
    VarId h1 = down0_(t, h0);
    h1 = enc1_(t, h1, temb);
    if (!features.empty()) h1 = cross1_(t, h1, features[1]);
    VarId h2 = down1_(t, h1);
    h2 = enc2_(t, h2, temb);
    if (!features.empty()) h2 = cross2_(t, h2, features[0]);
    h2 = joint_attn_(t, h2, false, 0, /*joint=*/true);
    h2 = mid_(t, h2, temb);

    VarId u1 = up1_(t, t.upsample2x(h2));
    u1 = dec1_(t, t.concat(u1, h1, 1), temb);
    VarId raw = head_(t, t.silu(out_norm_(t, u1)));  // [V,15,H/2,W/2]

    CloudVars all;
    for (int vi = 0; vi < v; ++vi) {
        VarId raw_view = t.slice(raw, 0, vi, vi + 1);
        CloudVars cv = activate_gaussians(t, raw_view, cameras[static_cast<size_t>(vi)], cfg_);
        if (vi == 0) {
            all = cv;
        } else {
            all.positions = t.concat(all.positions, cv.positions, 0);
            all.scales = t.concat(all.scales, cv.scales, 0);
            all.rotations = t.concat(all.rotations, cv.rotations, 0);
            all.opacities = t.concat(all.opacities, cv.opacities, 0);
            all.colors = t.concat(all.colors, cv.colors, 0);
        }
    }
    return all;
}

GaussianCloud Reconstructor::reconstruct(const Tensor& views,
                                         const std::vector<CameraPose>& cameras,
                                         const std::vector<int>& t_vec,
                                         const DenoiserFeatures* features) const {
    Tape tape;
    std::vector<VarId> feat_vars;
    if (features)
        for (const auto& lvl : features->levels) feat_vars.push_back(tape.constant(lvl.feat));
    CloudVars cv = forward(tape, tape.constant(views), cameras, t_vec, feat_vars);
    GaussianCloud cloud;
    cloud.positions = tape.val(cv.positions);
    cloud.scales = tape.val(cv.scales);
    cloud.rotations = tape.val(cv.rotations);
    cloud.opacities = tape.val(cv.opacities);
    cloud.colors = tape.val(cv.colors);
    return cloud;
}

}  // namespace splatloop
