#pragma once

#include <optional>
#include <vector>

#include "splatloop/denoiser.hpp"
#include "splatloop/gsplat.hpp"
#include "splatloop/nn_blocks.hpp"

namespace splatloop {

// Feed-forward sparse-view reconstructor: an asymmetric U-Net from V clean
// views (RGB + Pluecker rays, 9 channels) to one Gaussian per output pixel
// at half the input resolution. Timestep conditioning enters through
// zero-initialized per-resblock projections; denoiser decoder features enter
// through zero-gated cross-attention, so at initialization the network is
// exactly independent of both.

struct ReconstructorConfig {
    int input_size = 64;
    int base_width = 64;
    int heads = 4;
    // Channel widths of the injected denoiser feature levels, deepest first
    // (matching Denoiser::feature_channels()).
    std::vector<int> feat_channels = {256, 128};
    double depth_near = 0.5;
    double depth_far = 2.5;
    double offset_scale = 0.1;
    double scale_min = 0.003;
    double scale_max = 0.3;
    int temb_dim() const { return 2 * base_width; }
    int out_size() const { return input_size / 2; }
};

// On-tape Gaussian cloud (attribute tensors of one render call).
struct CloudVars {
    nn::VarId positions = -1;
    nn::VarId scales = -1;
    nn::VarId rotations = -1;
    nn::VarId opacities = -1;
    nn::VarId colors = -1;
};

class Reconstructor {
  public:
    Reconstructor(nn::ParamStore& ps, const ReconstructorConfig& cfg, Rng& rng,
                  const std::string& prefix = "rec");

    // Tape-level forward. `views` is [V,3,H,W] in [0,1]; `features` are
    // tape vars of denoiser decoder maps (deepest first) or empty.
    CloudVars forward(nn::Tape& t, nn::VarId views, const std::vector<CameraPose>& cameras,
                      const std::vector<int>& t_vec, const std::vector<nn::VarId>& features)
        const;

    // Plain wrapper producing a GaussianCloud.
    GaussianCloud reconstruct(const Tensor& views, const std::vector<CameraPose>& cameras,
                              const std::vector<int>& t_vec,
                              const DenoiserFeatures* features = nullptr) const;

    const ReconstructorConfig& config() const { return cfg_; }

  private:
    ReconstructorConfig cfg_;
    nn::TimeEmbed time_embed_;
    nn::Conv2d in_conv_;
    nn::ResBlock enc0_;
    nn::Conv2d down0_;
    nn::ResBlock enc1_;
    nn::CrossAttention2d cross1_;  // H/2 level <- denoiser H/2 features
    nn::Conv2d down1_;
    nn::ResBlock enc2_;
    nn::CrossAttention2d cross2_;  // H/4 level <- denoiser H/4 features
    nn::SelfAttention2d joint_attn_;
    nn::ResBlock mid_;
    nn::Conv2d up1_;
    nn::ResBlock dec1_;
    nn::GroupNorm out_norm_;
    nn::Conv2d head_;  // 15 channels: depth 1, offset 3, scale 3, rot 4, opacity 1, color 3
};

// Raw head channels -> activated per-pixel Gaussians for one view, placed
// along the output-grid camera rays. Exposed for tests.
CloudVars activate_gaussians(nn::Tape& t, nn::VarId raw_view, const CameraPose& cam,
                             const ReconstructorConfig& cfg);

}  // namespace splatloop
