#pragma once

#include <optional>
#include <string>
#include <vector>

#include "splatloop/autodiff.hpp"
#include "splatloop/camera.hpp"
#include "splatloop/gsplat.hpp"

namespace splatloop {

inline constexpr double kPsnrCap = 99.0;  // returned for identical images

double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01 K2=0.03,
// channel-mean grayscale, valid-region windows. Throws for images smaller
// than the window.
double ssim(const Tensor& a, const Tensor& b);

// Training-free stand-in for a learned perceptual metric: L2 between the
// feature maps of a 3-level stride-2 random convolution pyramid with a fixed
// published seed. Deterministic and differentiable; NOT equivalent to
// learned perceptual metrics.
inline constexpr uint64_t kPerceptualSeed = 1789;

class PerceptualNet {
  public:
    PerceptualNet();
    // a, b: [N,3,H,W]; returns the summed per-level mean squared feature
    // distance as a tape scalar.
    nn::VarId distance(nn::Tape& t, nn::VarId a, nn::VarId b) const;
    double distance(const Tensor& a, const Tensor& b) const;

  private:
    Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

const PerceptualNet& shared_perceptual_net();

// Depth-guided cross-view photometric consistency: mean absolute color
// difference between every view's pixels and their reprojections into every
// other view, over co-visible pixels. The reference cloud supplies depth.
// Returns nothing when no pixel pair is co-visible (e.g. a single view).
std::optional<double> consistency_error(const Tensor& views,
                                        const std::vector<CameraPose>& cameras,
                                        const GaussianCloud& reference_cloud);

struct EvalReport {
    std::vector<double> per_view_psnr;
    std::vector<double> per_view_ssim;
    std::vector<double> per_view_perceptual;
    double mean_psnr = 0, mean_ssim = 0, mean_perceptual = 0;
    std::optional<double> consistency;
    uint64_t seed = 0;
    uint64_t config_hash = 0;

    void finalize();  // fills the aggregate fields
    void write(const std::string& kv_path, const std::string& csv_path = "") const;
};

}  // namespace splatloop
