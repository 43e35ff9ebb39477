#pragma once

#include <functional>
#include <string>
#include <vector>

#include "splatloop/camera.hpp"
#include "splatloop/tensor.hpp"

namespace splatloop {

// Differentiable 3D Gaussian splatting with brute-force per-pixel
// compositing. Internals run in double; gradients are analytic for every
// Gaussian attribute.

struct GaussianCloud {
    Tensor positions;  // [N,3] world units
    Tensor scales;     // [N,3] positive
    Tensor rotations;  // [N,4] quaternion (w,x,y,z); normalized on use
    Tensor opacities;  // [N] in [0,1]
    Tensor colors;     // [N,3] in [0,1]

    int size() const { return positions.rank() == 2 ? positions.dim(0) : 0; }
    void validate() const;
    static GaussianCloud empty();
    static GaussianCloud with_size(int n);
};

struct RenderOutput {
    Tensor image;       // [3,H,W] in [0,1] when cloud/background are
    Tensor alpha_mask;  // [H,W] in [0,1]
    Tensor depth;       // [H,W] alpha-weighted mean depth (diagnostic)
};

struct RenderSettings {
    double lowpass = 0.3;              // px^2 added to the 2D covariance diagonal
    double alpha_cutoff = 1.0 / 255.0; // contributions below this are skipped
    double transmittance_floor = 1e-4; // early-out once this opaque
    double alpha_clamp = 0.9999;       // keeps the backward finite
    double near_clip = 0.05;           // camera-space z culling plane

    // Cutoff-free variant used by gradient checks: the forward becomes smooth
    // so central differences do not straddle skip boundaries.
    static RenderSettings exact() {
        RenderSettings s;
        s.alpha_cutoff = 0.0;
        s.transmittance_floor = 0.0;
        return s;
    }
};

// Sigma = R(q) diag(s^2) R(q)^T. Rejects zero-norm quaternions.
Mat3 covariance_3d(const Vec3& scale, const std::array<double, 4>& quat);

struct ProjectedGaussian {
    double mean[2] = {0, 0};     // pixel coordinates
    double cov[2][2] = {{0, 0}, {0, 0}};
    double depth = 0;            // camera-space z
    bool culled = false;
};
std::vector<ProjectedGaussian> project(const GaussianCloud& cloud, const CameraPose& cam,
                                       const RenderSettings& settings = {});

RenderOutput render(const GaussianCloud& cloud, const CameraPose& cam, const Vec3& background,
                    const RenderSettings& settings = {});

// Always-serial reference without the bounding-box fast path; the OpenMP
// render must match it bit for bit.
RenderOutput render_reference(const GaussianCloud& cloud, const CameraPose& cam,
                              const Vec3& background, const RenderSettings& settings = {});

// Double-precision output variant; the float RenderOutput is this, rounded.
// Gradient checks difference this one so float rounding does not drown the
// finite-difference signal.
struct RenderOutputD {
    int h = 0, w = 0;
    std::vector<double> image;  // 3*h*w
    std::vector<double> mask;   // h*w
    std::vector<double> depth;  // h*w
};
RenderOutputD render_f64(const GaussianCloud& cloud, const CameraPose& cam,
                         const Vec3& background, const RenderSettings& settings = {});

struct CloudGrads {
    Tensor positions, scales, rotations, opacities, colors;
    static CloudGrads zeros_like(const GaussianCloud& cloud);
    void accumulate_scaled(const CloudGrads& other, float s);
};

// Recomputes the forward internally and accumulates dL/d(attributes) given
// dL/d(image) and dL/d(mask). No gradients flow to the camera or background.
void render_backward(const GaussianCloud& cloud, const CameraPose& cam, const Vec3& background,
                     const RenderSettings& settings, const Tensor& grad_image,
                     const Tensor& grad_mask, CloudGrads& grads);

// Scalar image functional for gradient checking.
struct RenderLoss {
    virtual ~RenderLoss() = default;
    virtual double eval(const RenderOutputD& out) const = 0;
    virtual void grad(const RenderOutputD& out, std::vector<double>& grad_image,
                      std::vector<double>& grad_mask) const = 0;
};

// L2 distance to fixed target image and mask.
struct L2RenderLoss : RenderLoss {
    std::vector<double> target_image, target_mask;
    double mask_weight = 1.0;
    double eval(const RenderOutputD& out) const override;
    void grad(const RenderOutputD& out, std::vector<double>& grad_image,
              std::vector<double>& grad_mask) const override;
};

// Compares analytic gradients of `loss` against central finite differences
// over every attribute of every Gaussian; returns the worst relative error.
// Runs with RenderSettings::exact() so the forward is smooth.
double render_gradcheck(const GaussianCloud& cloud, const CameraPose& cam, const Vec3& background,
                        const RenderLoss& loss, double fd_step = 1e-4);

// Persistence: flat FTC container and the community splat PLY layout
// (binary little-endian; log-scales, logit-opacities, SH DC colors).
void save_cloud_ftc(const std::string& path, const GaussianCloud& cloud);
GaussianCloud load_cloud_ftc(const std::string& path);
void export_ply(const std::string& path, const GaussianCloud& cloud);

}  // namespace splatloop
