#pragma once

#include <optional>
#include <vector>

#include "splatloop/camera.hpp"
#include "splatloop/nn_blocks.hpp"
#include "splatloop/scheduler.hpp"

namespace splatloop {

// Toy conditional 2D U-Net noise predictor. Views share weights as a batch
// dimension; there is deliberately no cross-view mixing except the optional
// reference K/V injection inside self-attention.

struct MultiViewBatch {
    Tensor views;                           // [V,C,H,W], model space [-1,1]
    std::vector<int> per_view_t;            // 0..T, 0 = clean
    std::vector<CameraPose> cameras;        // carried for the pipeline
    std::vector<std::vector<int>> tokens;   // conditioning ids per view
    int reference_index = 0;

    int view_count() const { return views.rank() == 4 ? views.dim(0) : 0; }
    void validate(int max_t, int vocab_size) const;
};

struct DenoiserFeatures {
    struct Level {
        int downsample = 1;  // spatial divisor relative to the input
        Tensor feat;         // [V, C, H/downsample, W/downsample]
    };
    std::vector<Level> levels;
};

struct DenoiserConfig {
    int image_size = 64;
    int channels = 3;
    int base_width = 64;
    int heads = 4;
    int vocab_size = 16;  // includes the reserved NULL id 0
    int temb_dim() const { return 2 * base_width; }
};

class Denoiser {
  public:
    Denoiser(nn::ParamStore& ps, const DenoiserConfig& cfg, Rng& rng,
             const std::string& prefix = "den");

    // Tape-level forward; per-view conditioning rides on the time embedding.
    // When features_out is non-null the decoder feature maps (conditional
    // pass) are exposed, deepest level first.
    nn::VarId forward(nn::Tape& t, nn::VarId x, const std::vector<int>& t_vec,
                      const std::vector<std::vector<int>>& tokens, bool ref_injection,
                      int ref_index, std::vector<nn::VarId>* features_out = nullptr) const;

    // Plain inference wrapper implementing classifier-free guidance. With
    // guidance.scale == 1 this is exactly one conditional pass.
    Tensor predict_noise(const MultiViewBatch& batch, const GuidanceConfig& guidance,
                         bool ref_injection, DenoiserFeatures* features = nullptr) const;

    // Sinusoidal embedding + learned projection per view; t = 0 is the
    // clean-image embedding.
    Tensor per_view_time_embed(const std::vector<int>& t_vec) const;

    // Embedding lookup + mean-pool; the reserved NULL id 0 yields the learned
    // unconditional embedding.
    Tensor embed_conditioning(const std::vector<int>& token_ids) const;

    const DenoiserConfig& config() const { return cfg_; }
    // Feature channel widths per exposed level, deepest first.
    std::vector<int> feature_channels() const;
    std::vector<int> feature_downsamples() const { return {4, 2}; }

  private:
    DenoiserConfig cfg_;
    nn::TimeEmbed time_embed_;
    nn::Param* cond_table_ = nullptr;
    nn::Conv2d in_conv_;
    nn::ResBlock enc0_;
    nn::Conv2d down0_;
    nn::ResBlock enc1_;
    nn::SelfAttention2d attn_enc1_;
    nn::Conv2d down1_;
    nn::ResBlock mid0_;
    nn::SelfAttention2d attn_mid_;
    nn::ResBlock mid1_;
    nn::Conv2d up1_;
    nn::ResBlock dec1_;
    nn::SelfAttention2d attn_dec1_;
    nn::Conv2d up0_;
    nn::ResBlock dec0_;
    nn::GroupNorm out_norm_;
    nn::Conv2d out_conv_;

    nn::VarId cond_rows(nn::Tape& t, const std::vector<std::vector<int>>& tokens) const;
};

}  // namespace splatloop
