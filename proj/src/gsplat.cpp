#include "splatloop/gsplat.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "splatloop/io.hpp"
#include "splatloop/kernels.hpp"

namespace splatloop {

namespace {

constexpr double kPowerFloor = -50.0;  // exp() below this is treated as zero

struct Prep {
    bool culled = true;
    double mean_u = 0, mean_v = 0;
    double conic[3] = {0, 0, 0};  // a, b, c of inverse 2D covariance
    double depth = 0;
    double opa = 0;
    double col[3] = {0, 0, 0};
    double radius = 0;      // beyond this pixel distance the pixel test skips
    double thr_power = 0;   // pixel test: skip when power < thr_power
    // cached for the backward chain
    double p_cam[3] = {0, 0, 0};
    double rot3[3][3] = {};   // quaternion rotation matrix
    double qn[4] = {1, 0, 0, 0};
    double qnorm = 1;
    double scale[3] = {1, 1, 1};
    double m[2][3] = {};      // J * R_cw
    double sigma3[3][3] = {}; // world-space covariance
};

void quat_to_rot(const double q[4], double r[3][3]) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    r[0][0] = 1 - 2 * (y * y + z * z);
    r[0][1] = 2 * (x * y - w * z);
    r[0][2] = 2 * (x * z + w * y);
    r[1][0] = 2 * (x * y + w * z);
    r[1][1] = 1 - 2 * (x * x + z * z);
    r[1][2] = 2 * (y * z - w * x);
    r[2][0] = 2 * (x * z - w * y);
    r[2][1] = 2 * (y * z + w * x);
    r[2][2] = 1 - 2 * (x * x + y * y);
}

std::vector<Prep> prepare(const GaussianCloud& cloud, const CameraPose& cam,
                          const RenderSettings& st) {
    const int n = cloud.size();
    std::vector<Prep> preps(static_cast<size_t>(n));
    const double f = cam.focal;
    for (int i = 0; i < n; ++i) {
        Prep& g = preps[static_cast<size_t>(i)];
        const Vec3 p = {cloud.positions.at2(i, 0), cloud.positions.at2(i, 1),
                        cloud.positions.at2(i, 2)};
        const Vec3 pc = cam.to_camera(p);
        if (pc[2] <= st.near_clip) continue;  // behind or too close: culled

        double qraw[4] = {cloud.rotations.at2(i, 0), cloud.rotations.at2(i, 1),
                          cloud.rotations.at2(i, 2), cloud.rotations.at2(i, 3)};
        const double qn2 = qraw[0] * qraw[0] + qraw[1] * qraw[1] + qraw[2] * qraw[2] +
                           qraw[3] * qraw[3];
        if (qn2 < 1e-24) throw std::invalid_argument("zero-norm quaternion in cloud");
        g.qnorm = std::sqrt(qn2);
        for (int k = 0; k < 4; ++k) g.qn[k] = qraw[k] / g.qnorm;
        quat_to_rot(g.qn, g.rot3);

        for (int k = 0; k < 3; ++k) g.scale[k] = cloud.scales.at2(i, k);
        // Sigma3 = R diag(s^2) R^T
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int k = 0; k < 3; ++k)
                    acc += g.rot3[r][k] * g.scale[k] * g.scale[k] * g.rot3[c][k];
                g.sigma3[r][c] = acc;
            }

        const double x = pc[0], y = pc[1], z = pc[2];
        // M = J * R_cw with J the perspective Jacobian at the mean.
        const double j[2][3] = {{f / z, 0, -f * x / (z * z)}, {0, f / z, -f * y / (z * z)}};
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int k = 0; k < 3; ++k)
                    acc += j[r][k] * cam.rot[static_cast<size_t>(k)][static_cast<size_t>(c)];
                g.m[r][c] = acc;
            }
        // cov2d = M Sigma3 M^T + lowpass * I
        double ms[2][3];
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int k = 0; k < 3; ++k) acc += g.m[r][k] * g.sigma3[k][c];
                ms[r][c] = acc;
            }
        const double a = ms[0][0] * g.m[0][0] + ms[0][1] * g.m[0][1] + ms[0][2] * g.m[0][2] +
                         st.lowpass;
        const double b = ms[0][0] * g.m[1][0] + ms[0][1] * g.m[1][1] + ms[0][2] * g.m[1][2];
        const double c = ms[1][0] * g.m[1][0] + ms[1][1] * g.m[1][1] + ms[1][2] * g.m[1][2] +
                         st.lowpass;
        const double det = a * c - b * b;
        if (det <= 0) continue;  // cannot happen with lowpass > 0; keep the guard

        g.conic[0] = c / det;
        g.conic[1] = -b / det;
        g.conic[2] = a / det;
        g.mean_u = f * x / z + cam.cx;
        g.mean_v = f * y / z + cam.cy;
        g.depth = z;
        g.opa = cloud.opacities.v[static_cast<size_t>(i)];
        for (int k = 0; k < 3; ++k) g.col[k] = cloud.colors.at2(i, k);
        for (int k = 0; k < 3; ++k) g.p_cam[k] = pc[static_cast<size_t>(k)];

        // Skip threshold: alpha' = opa * exp(power) < cutoff, floored so exp
        // never underflows. The radius bound uses the largest eigenvalue of
        // cov2d, so the box test can only skip pixels the power test skips.
        double thr = kPowerFloor;
        if (st.alpha_cutoff > 0) {
            if (g.opa < st.alpha_cutoff) continue;  // never contributes
            thr = std::max(thr, std::log(st.alpha_cutoff / g.opa));
        }
        g.thr_power = thr;
        const double lam_max = 0.5 * (a + c) + std::sqrt(0.25 * (a - c) * (a - c) + b * b);
        g.radius = std::sqrt(2.0 * (-thr) * lam_max);
        g.culled = false;
    }
    return preps;
}

std::vector<int> depth_order(const std::vector<Prep>& preps) {
    std::vector<int> order;
    order.reserve(preps.size());
    for (size_t i = 0; i < preps.size(); ++i)
        if (!preps[i].culled) order.push_back(static_cast<int>(i));
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double da = preps[static_cast<size_t>(a)].depth;
        const double db = preps[static_cast<size_t>(b)].depth;
        return da != db ? da < db : a < b;
    });
    return order;
}

// Front-to-back walk over one pixel. fn(idx, alpha_prime, g, dx, dy, T_before)
// is called for every surviving contribution; returns the final transmittance.
template <class Fn>
double walk_pixel(const std::vector<Prep>& preps, const std::vector<int>& order, double px,
                  double py, const RenderSettings& st, bool use_box, Fn&& fn) {
    double t = 1.0;
    for (int idx : order) {
        const Prep& g = preps[static_cast<size_t>(idx)];
        const double dx = px - g.mean_u, dy = py - g.mean_v;
        if (use_box && (std::abs(dx) > g.radius || std::abs(dy) > g.radius)) continue;
        const double power =
            -0.5 * (g.conic[0] * dx * dx + 2.0 * g.conic[1] * dx * dy + g.conic[2] * dy * dy);
        if (!(power >= g.thr_power)) continue;
        const double gauss = std::exp(power);
        const double alpha = std::min(g.opa * gauss, st.alpha_clamp);
        if (st.alpha_cutoff > 0 && alpha < st.alpha_cutoff) continue;
        fn(idx, alpha, gauss, dx, dy, t);
        t *= 1.0 - alpha;
        if (st.transmittance_floor > 0 && t < st.transmittance_floor) break;
    }
    return t;
}

RenderOutputD render_impl(const GaussianCloud& cloud, const CameraPose& cam,
                          const Vec3& background, const RenderSettings& st, bool parallel,
                          bool use_box) {
    cloud.validate();
    cam.validate();
    const int h = cam.height, w = cam.width;
    const std::vector<Prep> preps = prepare(cloud, cam, st);
    const std::vector<int> order = depth_order(preps);

    RenderOutputD out;
    out.h = h;
    out.w = w;
    out.image.assign(static_cast<size_t>(3 * h * w), 0.0);
    out.mask.assign(static_cast<size_t>(h * w), 0.0);
    out.depth.assign(static_cast<size_t>(h * w), 0.0);

    const bool par = parallel && kernels::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            double c[3] = {0, 0, 0}, d = 0;
            const double t_final = walk_pixel(
                preps, order, px, py, st, use_box,
                [&](int idx, double alpha, double, double, double, double t_before) {
                    const Prep& g = preps[static_cast<size_t>(idx)];
                    const double wgt = alpha * t_before;
                    for (int k = 0; k < 3; ++k) c[k] += g.col[k] * wgt;
                    d += g.depth * wgt;
                });
            const double mask = 1.0 - t_final;
            for (int k = 0; k < 3; ++k)
                out.image[(static_cast<size_t>(k) * h + y) * w + x] =
                    c[k] + background[static_cast<size_t>(k)] * t_final;
            out.mask[static_cast<size_t>(y) * w + x] = mask;
            out.depth[static_cast<size_t>(y) * w + x] = mask > 1e-12 ? d / mask : 0.0;
        }
    }
    return out;
}

RenderOutput to_float(const RenderOutputD& d) {
    RenderOutput out;
    out.image = Tensor({3, d.h, d.w});
    out.alpha_mask = Tensor({d.h, d.w});
    out.depth = Tensor({d.h, d.w});
    for (size_t i = 0; i < d.image.size(); ++i) out.image.v[i] = static_cast<float>(d.image[i]);
    for (size_t i = 0; i < d.mask.size(); ++i) {
        out.alpha_mask.v[i] = static_cast<float>(d.mask[i]);
        out.depth.v[i] = static_cast<float>(d.depth[i]);
    }
    return out;
}

}  // namespace

void GaussianCloud::validate() const {
    const int n = size();
    auto expect = [&](const Tensor& t, std::vector<int> shape, const char* what) {
        if (t.shape != shape)
            throw std::invalid_argument(std::string("cloud ") + what + ": expected " +
                                        shape_str(shape) + ", got " + shape_str(t.shape));
    };
    expect(positions, {n, 3}, "positions");
    expect(scales, {n, 3}, "scales");
    expect(rotations, {n, 4}, "rotations");
    expect(opacities, {n}, "opacities");
    expect(colors, {n, 3}, "colors");
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k)
            if (!(scales.at2(i, k) > 0)) throw std::invalid_argument("cloud scales must be > 0");
        const float o = opacities.v[static_cast<size_t>(i)];
        if (!(o >= 0.0f && o <= 1.0f))
            throw std::invalid_argument("cloud opacities must be in [0,1]");
        for (int k = 0; k < 3; ++k) {
            const float c = colors.at2(i, k);
            if (!(c >= 0.0f && c <= 1.0f))
                throw std::invalid_argument("cloud colors must be in [0,1]");
        }
    }
}

GaussianCloud GaussianCloud::empty() { return with_size(0); }

GaussianCloud GaussianCloud::with_size(int n) {
    GaussianCloud c;
    c.positions = Tensor({n, 3});
    c.scales = Tensor::full({n, 3}, 1.0f);
    c.rotations = Tensor({n, 4});
    for (int i = 0; i < n; ++i) c.rotations.at2(i, 0) = 1.0f;
    c.opacities = Tensor({n});
    c.colors = Tensor({n, 3});
    return c;
}

Mat3 covariance_3d(const Vec3& scale, const std::array<double, 4>& quat) {
    const double n2 = quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] +
                      quat[3] * quat[3];
    if (n2 < 1e-24) throw std::invalid_argument("covariance_3d: zero-norm quaternion");
    for (double s : scale)
        if (!(s > 0)) throw std::invalid_argument("covariance_3d: scale must be positive");
    const double inv = 1.0 / std::sqrt(n2);
    double q[4] = {quat[0] * inv, quat[1] * inv, quat[2] * inv, quat[3] * inv};
    double r[3][3];
    quat_to_rot(q, r);
    Mat3 out{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0;
            for (int k = 0; k < 3; ++k)
                acc += r[i][k] * scale[static_cast<size_t>(k)] * scale[static_cast<size_t>(k)] *
                       r[j][k];
            out[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc;
        }
    return out;
}

std::vector<ProjectedGaussian> project(const GaussianCloud& cloud, const CameraPose& cam,
                                       const RenderSettings& settings) {
    cloud.validate();
    cam.validate();
    const auto preps = prepare(cloud, cam, settings);
    std::vector<ProjectedGaussian> out(preps.size());
    for (size_t i = 0; i < preps.size(); ++i) {
        const Prep& g = preps[i];
        out[i].culled = g.culled;
        if (g.culled) continue;
        out[i].mean[0] = g.mean_u;
        out[i].mean[1] = g.mean_v;
        // Return the covariance, not the conic.
        const double det = g.conic[0] * g.conic[2] - g.conic[1] * g.conic[1];
        out[i].cov[0][0] = g.conic[2] / det;
        out[i].cov[0][1] = out[i].cov[1][0] = -g.conic[1] / det;
        out[i].cov[1][1] = g.conic[0] / det;
        out[i].depth = g.depth;
    }
    return out;
}

RenderOutput render(const GaussianCloud& cloud, const CameraPose& cam, const Vec3& background,
                    const RenderSettings& settings) {
    return to_float(render_impl(cloud, cam, background, settings, /*parallel=*/true,
                                /*use_box=*/true));
}

RenderOutput render_reference(const GaussianCloud& cloud, const CameraPose& cam,
                              const Vec3& background, const RenderSettings& settings) {
    return to_float(render_impl(cloud, cam, background, settings, /*parallel=*/false,
                                /*use_box=*/false));
}

RenderOutputD render_f64(const GaussianCloud& cloud, const CameraPose& cam,
                         const Vec3& background, const RenderSettings& settings) {
    return render_impl(cloud, cam, background, settings, /*parallel=*/true, /*use_box=*/true);
}

CloudGrads CloudGrads::zeros_like(const GaussianCloud& cloud) {
    CloudGrads g;
    const int n = cloud.size();
    g.positions = Tensor({n, 3});
    g.scales = Tensor({n, 3});
    g.rotations = Tensor({n, 4});
    g.opacities = Tensor({n});
    g.colors = Tensor({n, 3});
    return g;
}

void CloudGrads::accumulate_scaled(const CloudGrads& other, float s) {
    auto acc = [s](Tensor& a, const Tensor& b) {
        for (int64_t i = 0; i < a.numel(); ++i)
            a.v[static_cast<size_t>(i)] += s * b.v[static_cast<size_t>(i)];
    };
    acc(positions, other.positions);
    acc(scales, other.scales);
    acc(rotations, other.rotations);
    acc(opacities, other.opacities);
    acc(colors, other.colors);
}

void render_backward(const GaussianCloud& cloud, const CameraPose& cam, const Vec3& background,
                     const RenderSettings& st, const Tensor& grad_image, const Tensor& grad_mask,
                     CloudGrads& grads) {
    cloud.validate();
    cam.validate();
    const int h = cam.height, w = cam.width;
    if (grad_image.shape != std::vector<int>{3, h, w} ||
        grad_mask.shape != std::vector<int>{h, w})
        throw std::invalid_argument("render_backward: gradient shape mismatch");
    const int n = cloud.size();
    if (n == 0) return;
    const std::vector<Prep> preps = prepare(cloud, cam, st);
    const std::vector<int> order = depth_order(preps);

    // Pixel-level gradients per gaussian: mean_u, mean_v, conic a/b/c,
    // color rgb, opacity. Accumulated into fixed row bands so the reduction
    // order (and therefore the result) is independent of thread count.
    constexpr int kPerG = 9;
    const int bands = std::min(16, h);
    std::vector<std::vector<double>> band_acc(static_cast<size_t>(bands));
    for (auto& b : band_acc) b.assign(static_cast<size_t>(n) * kPerG, 0.0);

    const bool par = kernels::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
    for (int band = 0; band < bands; ++band) {
        double* acc = band_acc[static_cast<size_t>(band)].data();
        const int y0 = static_cast<int>(static_cast<int64_t>(h) * band / bands);
        const int y1 = static_cast<int>(static_cast<int64_t>(h) * (band + 1) / bands);
        struct Contrib {
            int idx;
            double alpha, gauss, dx, dy, t_before;
        };
        std::vector<Contrib> contribs;
        contribs.reserve(256);
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < w; ++x) {
                contribs.clear();
                const double px = x + 0.5, py = y + 0.5;
                const double t_final = walk_pixel(
                    preps, order, px, py, st, /*use_box=*/true,
                    [&](int idx, double alpha, double gauss, double dx, double dy,
                        double t_before) {
                        contribs.push_back({idx, alpha, gauss, dx, dy, t_before});
                    });
                if (contribs.empty()) continue;
                const double g_img[3] = {
                    grad_image.v[(0 * static_cast<size_t>(h) + y) * w + x],
                    grad_image.v[(1 * static_cast<size_t>(h) + y) * w + x],
                    grad_image.v[(2 * static_cast<size_t>(h) + y) * w + x]};
                const double g_mask = grad_mask.v[static_cast<size_t>(y) * w + x];
                // Color composited behind the current contribution.
                double behind[3] = {background[0] * t_final, background[1] * t_final,
                                    background[2] * t_final};
                for (size_t ci = contribs.size(); ci-- > 0;) {
                    const Contrib& cb = contribs[ci];
                    const Prep& g = preps[static_cast<size_t>(cb.idx)];
                    double* ga = acc + static_cast<size_t>(cb.idx) * kPerG;
                    const double wgt = cb.alpha * cb.t_before;
                    const double one_m = 1.0 - cb.alpha;
                    double dl_dalpha = g_mask * t_final / one_m;
                    for (int k = 0; k < 3; ++k) {
                        ga[5 + k] += g_img[k] * wgt;  // color
                        dl_dalpha += g_img[k] * (cb.t_before * g.col[k] - behind[k] / one_m);
                    }
                    for (int k = 0; k < 3; ++k) behind[k] += g.col[k] * wgt;
                    if (g.opa * cb.gauss < st.alpha_clamp) {  // clamp boundary: subgradient 0
                        ga[8] += dl_dalpha * cb.gauss;        // opacity
                        const double dl_dpower = dl_dalpha * cb.alpha;
                        ga[0] += dl_dpower * (g.conic[0] * cb.dx + g.conic[1] * cb.dy);
                        ga[1] += dl_dpower * (g.conic[1] * cb.dx + g.conic[2] * cb.dy);
                        ga[2] += dl_dpower * (-0.5 * cb.dx * cb.dx);
                        ga[3] += dl_dpower * (-cb.dx * cb.dy);
                        ga[4] += dl_dpower * (-0.5 * cb.dy * cb.dy);
                    }
                }
            }
    }
    // Fixed-order reduction across bands.
    std::vector<double>& total = band_acc[0];
    for (int band = 1; band < bands; ++band)
        for (size_t i = 0; i < total.size(); ++i)
            total[i] += band_acc[static_cast<size_t>(band)][i];

    // Chain pixel-level gradients through projection and covariance.
    const double f = cam.focal;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < n; ++i) {
        const Prep& g = preps[static_cast<size_t>(i)];
        if (g.culled) continue;
        const double* acc = total.data() + static_cast<size_t>(i) * kPerG;
        const double gmu[2] = {acc[0], acc[1]};
        const double ga = acc[2], gb = acc[3], gc = acc[4];

        grads.colors.at2(i, 0) += static_cast<float>(acc[5]);
        grads.colors.at2(i, 1) += static_cast<float>(acc[6]);
        grads.colors.at2(i, 2) += static_cast<float>(acc[7]);
        grads.opacities.v[static_cast<size_t>(i)] += static_cast<float>(acc[8]);

        // conic = inv(cov2d): dL/dcov = -A * GA * A with GA the symmetric
        // matrix assembled from the shared off-diagonal parameter.
        const double A[2][2] = {{g.conic[0], g.conic[1]}, {g.conic[1], g.conic[2]}};
        const double GA[2][2] = {{ga, 0.5 * gb}, {0.5 * gb, gc}};
        double AG[2][2], gcov[2][2];
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) AG[r][c] = A[r][0] * GA[0][c] + A[r][1] * GA[1][c];
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c)
                gcov[r][c] = -(AG[r][0] * A[0][c] + AG[r][1] * A[1][c]);

        // cov2d = M Sigma3 M^T + lowpass I
        double g3[3][3];  // dL/dSigma3 = M^T gcov M
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                for (int a2 = 0; a2 < 2; ++a2)
                    for (int b2 = 0; b2 < 2; ++b2) s += g.m[a2][r] * gcov[a2][b2] * g.m[b2][c];
                g3[r][c] = s;
            }
        double gm[2][3];  // dL/dM = 2 gcov M Sigma3
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                for (int a2 = 0; a2 < 2; ++a2)
                    for (int k = 0; k < 3; ++k) s += 2.0 * gcov[r][a2] * g.m[a2][k] * g.sigma3[k][c];
                gm[r][c] = s;
            }
        // M = J R_cw: dL/dJ = dL/dM R_cw^T
        double gj[2][3];
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                for (int k = 0; k < 3; ++k)
                    s += gm[r][k] * cam.rot[static_cast<size_t>(c)][static_cast<size_t>(k)];
                gj[r][c] = s;
            }
        const double x = g.p_cam[0], y = g.p_cam[1], z = g.p_cam[2];
        const double z2 = z * z, z3 = z2 * z;
        double gpc[3];  // camera-space position gradient
        gpc[0] = gmu[0] * f / z + gj[0][2] * (-f / z2);
        gpc[1] = gmu[1] * f / z + gj[1][2] * (-f / z2);
        gpc[2] = gmu[0] * (-f * x / z2) + gmu[1] * (-f * y / z2) + gj[0][0] * (-f / z2) +
                 gj[1][1] * (-f / z2) + gj[0][2] * (2 * f * x / z3) + gj[1][2] * (2 * f * y / z3);
        for (int k = 0; k < 3; ++k)
            grads.positions.at2(i, k) += static_cast<float>(
                cam.rot[0][static_cast<size_t>(k)] * gpc[0] +
                cam.rot[1][static_cast<size_t>(k)] * gpc[1] +
                cam.rot[2][static_cast<size_t>(k)] * gpc[2]);

        // Sigma3 = R diag(s^2) R^T
        for (int k = 0; k < 3; ++k) {
            double quad = 0;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) quad += g.rot3[r][k] * g3[r][c] * g.rot3[c][k];
            grads.scales.at2(i, k) += static_cast<float>(2.0 * g.scale[k] * quad);
        }
        double gr[3][3];  // dL/dR = 2 G3 R diag(s^2)
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += 2.0 * g3[r][k] * g.rot3[k][c];
                gr[r][c] = s * g.scale[c] * g.scale[c];
            }
        const double qw = g.qn[0], qx = g.qn[1], qy = g.qn[2], qz = g.qn[3];
        const double dr_dq[4][3][3] = {
            {{0, -2 * qz, 2 * qy}, {2 * qz, 0, -2 * qx}, {-2 * qy, 2 * qx, 0}},
            {{0, 2 * qy, 2 * qz}, {2 * qy, -4 * qx, -2 * qw}, {2 * qz, 2 * qw, -4 * qx}},
            {{-4 * qy, 2 * qx, 2 * qw}, {2 * qx, 0, 2 * qz}, {-2 * qw, 2 * qz, -4 * qy}},
            {{-4 * qz, -2 * qw, 2 * qx}, {2 * qw, -4 * qz, 2 * qy}, {2 * qx, 2 * qy, 0}}};
        double gq[4];
        for (int k = 0; k < 4; ++k) {
            double s = 0;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) s += gr[r][c] * dr_dq[k][r][c];
            gq[k] = s;
        }
        // Through normalization of the raw quaternion.
        const double qdot = gq[0] * qw + gq[1] * qx + gq[2] * qy + gq[3] * qz;
        grads.rotations.at2(i, 0) += static_cast<float>((gq[0] - qw * qdot) / g.qnorm);
        grads.rotations.at2(i, 1) += static_cast<float>((gq[1] - qx * qdot) / g.qnorm);
        grads.rotations.at2(i, 2) += static_cast<float>((gq[2] - qy * qdot) / g.qnorm);
        grads.rotations.at2(i, 3) += static_cast<float>((gq[3] - qz * qdot) / g.qnorm);
    }
}

double L2RenderLoss::eval(const RenderOutputD& out) const {
    double s = 0;
    for (size_t i = 0; i < out.image.size(); ++i) {
        const double d = out.image[i] - target_image[i];
        s += d * d;
    }
    for (size_t i = 0; i < out.mask.size(); ++i) {
        const double d = out.mask[i] - target_mask[i];
        s += mask_weight * d * d;
    }
    return s;
}

void L2RenderLoss::grad(const RenderOutputD& out, std::vector<double>& grad_image,
                        std::vector<double>& grad_mask) const {
    grad_image.resize(out.image.size());
    grad_mask.resize(out.mask.size());
    for (size_t i = 0; i < out.image.size(); ++i)
        grad_image[i] = 2.0 * (out.image[i] - target_image[i]);
    for (size_t i = 0; i < out.mask.size(); ++i)
        grad_mask[i] = 2.0 * mask_weight * (out.mask[i] - target_mask[i]);
}

double render_gradcheck(const GaussianCloud& cloud, const CameraPose& cam, const Vec3& background,
                        const RenderLoss& loss, double fd_step) {
    const RenderSettings st = RenderSettings::exact();
    const RenderOutputD out = render_f64(cloud, cam, background, st);
    std::vector<double> gi, gm;
    loss.grad(out, gi, gm);
    Tensor g_img({3, out.h, out.w}), g_mask({out.h, out.w});
    for (size_t i = 0; i < gi.size(); ++i) g_img.v[i] = static_cast<float>(gi[i]);
    for (size_t i = 0; i < gm.size(); ++i) g_mask.v[i] = static_cast<float>(gm[i]);
    CloudGrads analytic = CloudGrads::zeros_like(cloud);
    render_backward(cloud, cam, background, st, g_img, g_mask, analytic);

    GaussianCloud probe = cloud;
    double worst = 0;
    auto check = [&](Tensor& attr, const Tensor& ga) {
        for (int64_t i = 0; i < attr.numel(); ++i) {
            const float saved = attr.v[static_cast<size_t>(i)];
            const float up = static_cast<float>(saved + fd_step);
            const float dn = static_cast<float>(saved - fd_step);
            attr.v[static_cast<size_t>(i)] = up;
            const double hi = loss.eval(render_f64(probe, cam, background, st));
            attr.v[static_cast<size_t>(i)] = dn;
            const double lo = loss.eval(render_f64(probe, cam, background, st));
            attr.v[static_cast<size_t>(i)] = saved;
            // Difference over the realized float step, not the nominal one.
            const double fd = (hi - lo) / (static_cast<double>(up) - static_cast<double>(dn));
            const double an = ga.v[static_cast<size_t>(i)];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    };
    check(probe.positions, analytic.positions);
    check(probe.scales, analytic.scales);
    check(probe.rotations, analytic.rotations);
    check(probe.opacities, analytic.opacities);
    check(probe.colors, analytic.colors);
    return worst;
}

void save_cloud_ftc(const std::string& path, const GaussianCloud& cloud) {
    cloud.validate();
    ftc_write(path, {{"positions", cloud.positions},
                     {"scales", cloud.scales},
                     {"rotations", cloud.rotations},
                     {"opacities", cloud.opacities},
                     {"colors", cloud.colors}});
}

GaussianCloud load_cloud_ftc(const std::string& path) {
    FtcMap m = ftc_read_map(path);
    GaussianCloud c;
    c.positions = m.get("positions");
    c.scales = m.get("scales");
    c.rotations = m.get("rotations");
    c.opacities = m.get("opacities");
    c.colors = m.get("colors");
    c.validate();
    return c;
}

void export_ply(const std::string& path, const GaussianCloud& cloud) {
    cloud.validate();
    const int n = cloud.size();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("export_ply: cannot open " + path);
    os << "ply\nformat binary_little_endian 1.0\nelement vertex " << n << "\n";
    for (const char* p : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
                          "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
                          "rot_3"})
        os << "property float " << p << "\n";
    os << "end_header\n";
    const double kSh0 = 0.28209479177387814;
    for (int i = 0; i < n; ++i) {
        float rec[17];
        for (int k = 0; k < 3; ++k) rec[k] = cloud.positions.at2(i, k);
        rec[3] = rec[4] = rec[5] = 0.0f;
        for (int k = 0; k < 3; ++k)
            rec[6 + k] = static_cast<float>((cloud.colors.at2(i, k) - 0.5) / kSh0);
        const double o =
            std::clamp(static_cast<double>(cloud.opacities.v[static_cast<size_t>(i)]), 1e-6,
                       1.0 - 1e-6);
        rec[9] = static_cast<float>(std::log(o / (1.0 - o)));
        for (int k = 0; k < 3; ++k)
            rec[10 + k] = static_cast<float>(std::log(cloud.scales.at2(i, k)));
        double q[4] = {cloud.rotations.at2(i, 0), cloud.rotations.at2(i, 1),
                       cloud.rotations.at2(i, 2), cloud.rotations.at2(i, 3)};
        const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        for (int k = 0; k < 4; ++k) rec[13 + k] = static_cast<float>(q[k] / qn);
        os.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
    if (!os) throw std::runtime_error("export_ply: write failed for " + path);
}

}  // namespace splatloop
