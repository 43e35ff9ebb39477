#include "splatloop/metrics.hpp"

#include <cmath>
#include <fstream>

#include "splatloop/io.hpp"
#include "splatloop/nn_blocks.hpp"
#include "splatloop/rng.hpp"

namespace splatloop {

double psnr(const Tensor& a, const Tensor& b, double peak) {
    check_same_shape(a, b, "psnr");
    if (peak <= 0) throw std::invalid_argument("psnr: peak must be positive");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.v[static_cast<size_t>(i)]) -
                         b.v[static_cast<size_t>(i)];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

namespace {

// Channel-mean grayscale for [3,H,W] (or passthrough for [H,W]).
std::vector<double> to_gray(const Tensor& img, int& h, int& w) {
    if (img.rank() == 2) {
        h = img.dim(0);
        w = img.dim(1);
        return std::vector<double>(img.v.begin(), img.v.end());
    }
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("ssim: expects [3,H,W] or [H,W]");
    h = img.dim(1);
    w = img.dim(2);
    std::vector<double> g(static_cast<size_t>(h) * w);
    for (int i = 0; i < h * w; ++i)
        g[static_cast<size_t>(i)] =
            (static_cast<double>(img.v[static_cast<size_t>(i)]) +
             img.v[static_cast<size_t>(h) * w + i] +
             img.v[2 * static_cast<size_t>(h) * w + i]) / 3.0;
    return g;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "ssim");
    int h = 0, w = 0;
    const std::vector<double> ga = to_gray(a, h, w);
    int h2, w2;
    const std::vector<double> gb = to_gray(b, h2, w2);
    constexpr int kWin = 11;
    if (h < kWin || w < kWin) throw std::invalid_argument("ssim: image smaller than the window");

    double kernel[kWin];
    double ksum = 0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - (kWin - 1) / 2.0;
        kernel[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        ksum += kernel[i];
    }
    for (double& k : kernel) k /= ksum;

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0;
    int count = 0;
    for (int y = 0; y + kWin <= h; ++y)
        for (int x = 0; x + kWin <= w; ++x) {
            double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double wij = kernel[i] * kernel[j];
                    const double pa = ga[static_cast<size_t>(y + i) * w + (x + j)];
                    const double pb = gb[static_cast<size_t>(y + i) * w + (x + j)];
                    ma += wij * pa;
                    mb += wij * pb;
                    va += wij * pa * pa;
                    vb += wij * pb * pb;
                    cov += wij * pa * pb;
                }
            va -= ma * ma;
            vb -= mb * mb;
            cov -= ma * mb;
            const double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                             ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            ++count;
        }
    return total / count;
}

PerceptualNet::PerceptualNet() {
    Rng rng(kPerceptualSeed);
    w1_ = nn::kaiming_conv_init(rng, 12, 3, 3, 3);
    b1_ = Tensor({12});
    w2_ = nn::kaiming_conv_init(rng, 24, 12, 3, 3);
    b2_ = Tensor({24});
    w3_ = nn::kaiming_conv_init(rng, 48, 24, 3, 3);
    b3_ = Tensor({48});
}

nn::VarId PerceptualNet::distance(nn::Tape& t, nn::VarId a, nn::VarId b) const {
    auto pyramid = [&](nn::VarId x) {
        std::vector<nn::VarId> feats;
        nn::VarId f1 = t.silu(t.conv2d(x, t.constant(w1_), t.constant(b1_), 2, 1));
        nn::VarId f2 = t.silu(t.conv2d(f1, t.constant(w2_), t.constant(b2_), 2, 1));
        nn::VarId f3 = t.conv2d(f2, t.constant(w3_), t.constant(b3_), 2, 1);
        feats.push_back(f1);
        feats.push_back(f2);
        feats.push_back(f3);
        return feats;
    };
    const auto fa = pyramid(a);
    const auto fb = pyramid(b);
    nn::VarId total = t.mse(fa[0], fb[0]);
    total = t.add(total, t.mse(fa[1], fb[1]));
    total = t.add(total, t.mse(fa[2], fb[2]));
    return total;
}

double PerceptualNet::distance(const Tensor& a, const Tensor& b) const {
    check_same_shape(a, b, "perceptual distance");
    nn::Tape tape;
    Tensor a4 = a, b4 = b;
    if (a.rank() == 3) {
        a4.shape = {1, a.dim(0), a.dim(1), a.dim(2)};
        b4.shape = a4.shape;
    }
    return tape.val(distance(tape, tape.constant(a4), tape.constant(b4))).v[0];
}

const PerceptualNet& shared_perceptual_net() {
    static PerceptualNet net;
    return net;
}

std::optional<double> consistency_error(const Tensor& views,
                                        const std::vector<CameraPose>& cameras,
                                        const GaussianCloud& reference_cloud) {
    if (views.rank() != 4 || views.dim(1) != 3)
        throw std::invalid_argument("consistency_error: expects [V,3,H,W]");
    const int v = views.dim(0), h = views.dim(2), w = views.dim(3);
    if (static_cast<int>(cameras.size()) != v)
        throw std::invalid_argument("consistency_error: camera count mismatch");
    if (v < 2) return std::nullopt;

    std::vector<RenderOutput> geo;
    geo.reserve(static_cast<size_t>(v));
    for (const auto& cam : cameras) geo.push_back(render(reference_cloud, cam, {1, 1, 1}));

    auto sample_bilinear = [&](const Tensor& img, int plane_h, int plane_w, int c, double y,
                               double x) {
        const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
        const int x1 = std::min(x0 + 1, plane_w - 1), y1 = std::min(y0 + 1, plane_h - 1);
        const double fx = x - x0, fy = y - y0;
        auto at = [&](int yy, int xx) {
            return static_cast<double>(
                img.v[(static_cast<size_t>(c) * plane_h + yy) * plane_w + xx]);
        };
        return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
               fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    };

    double total = 0;
    int64_t count = 0;
    constexpr double kDepthTol = 0.08;
    for (int i = 0; i < v; ++i) {
        const CameraPose& ci = cameras[static_cast<size_t>(i)];
        for (int j = 0; j < v; ++j) {
            if (j == i) continue;
            const CameraPose& cj = cameras[static_cast<size_t>(j)];
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float mi =
                        geo[static_cast<size_t>(i)].alpha_mask.v[static_cast<size_t>(y) * w + x];
                    if (mi < 0.5f) continue;
                    const double z =
                        geo[static_cast<size_t>(i)].depth.v[static_cast<size_t>(y) * w + x];
                    if (z <= 0) continue;
                    // Unproject pixel center through camera i.
                    const double u = x + 0.5, vv = y + 0.5;
                    const Vec3 p_cam = {(u - ci.cx) / ci.focal * z, (vv - ci.cy) / ci.focal * z,
                                        z};
                    Vec3 world;
                    for (int k = 0; k < 3; ++k)
                        world[static_cast<size_t>(k)] =
                            ci.rot[0][static_cast<size_t>(k)] * (p_cam[0] - ci.trans[0]) +
                            ci.rot[1][static_cast<size_t>(k)] * (p_cam[1] - ci.trans[1]) +
                            ci.rot[2][static_cast<size_t>(k)] * (p_cam[2] - ci.trans[2]);
                    const Vec3 q_cam = cj.to_camera(world);
                    if (q_cam[2] <= 0.05) continue;
                    const double uj = cj.focal * q_cam[0] / q_cam[2] + cj.cx;
                    const double vj = cj.focal * q_cam[1] / q_cam[2] + cj.cy;
                    if (uj < 0.5 || uj > w - 0.5 || vj < 0.5 || vj > h - 0.5) continue;
                    const int xj = std::min(w - 1, std::max(0, static_cast<int>(uj)));
                    const int yj = std::min(h - 1, std::max(0, static_cast<int>(vj)));
                    const float mj =
                        geo[static_cast<size_t>(j)].alpha_mask.v[static_cast<size_t>(yj) * w + xj];
                    if (mj < 0.5f) continue;
                    const double zj =
                        geo[static_cast<size_t>(j)].depth.v[static_cast<size_t>(yj) * w + xj];
                    if (std::abs(zj - q_cam[2]) > kDepthTol) continue;  // occluded

                    double diff = 0;
                    for (int c = 0; c < 3; ++c) {
                        const double a =
                            views.v[((static_cast<size_t>(i) * 3 + c) * h + y) * w + x];
                        // Channel planes of view j live at rows j*3+c of the
                        // flattened [V*3,H,W] layout.
                        const double b = sample_bilinear(views, h, w, j * 3 + c, vj - 0.5,
                                                         uj - 0.5);
                        diff += std::abs(a - b);
                    }
                    total += diff / 3.0;
                    ++count;
                }
        }
    }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
}

void EvalReport::finalize() {
    auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    mean_psnr = mean(per_view_psnr);
    mean_ssim = mean(per_view_ssim);
    mean_perceptual = mean(per_view_perceptual);
}

void EvalReport::write(const std::string& kv_path, const std::string& csv_path) const {
    KvConfig kv;
    kv.set("mean_psnr", std::to_string(mean_psnr));
    kv.set("mean_ssim", std::to_string(mean_ssim));
    kv.set("mean_perceptual", std::to_string(mean_perceptual));
    if (consistency) kv.set("consistency_error", std::to_string(*consistency));
    kv.set("views", std::to_string(per_view_psnr.size()));
    kv.set("seed", std::to_string(seed));
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(config_hash));
    kv.set("config_hash", hex);
    kv.write_file(kv_path);

    if (!csv_path.empty()) {
        std::ofstream os(csv_path);
        os << "view,psnr,ssim,perceptual\n";
        for (size_t i = 0; i < per_view_psnr.size(); ++i) {
            os << i << "," << per_view_psnr[i] << "," << per_view_ssim[i] << ","
               << (i < per_view_perceptual.size() ? per_view_perceptual[i] : 0.0) << "\n";
        }
    }
}

}  // namespace splatloop
