#include "splatloop/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "splatloop/io.hpp"

namespace splatloop {

namespace {

constexpr double kOrbitRadius = 1.5;
constexpr double kDeg = M_PI / 180.0;

const char* kTokenNames[kVocabSize] = {"null",   "red",  "green",   "blue", "yellow",
                                       "magenta", "cyan", "blob", "ellipsoid", "ring"};

const double kPalette[kNumColors][3] = {{0.85, 0.15, 0.15}, {0.15, 0.80, 0.20},
                                        {0.15, 0.25, 0.85}, {0.85, 0.80, 0.15},
                                        {0.80, 0.20, 0.80}, {0.15, 0.80, 0.80}};

Vec3 random_unit(Rng& rng) {
    while (true) {
        Vec3 v = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const double n = norm(v);
        if (n > 1e-3 && n <= 1.0) return {v[0] / n, v[1] / n, v[2] / n};
    }
}

}  // namespace

int color_token(int color_class) { return 1 + color_class; }
int shape_token(int shape_class) { return 1 + kNumColors + shape_class; }

const char* token_name(int id) {
    if (id < 0 || id >= kVocabSize) throw std::invalid_argument("token id out of vocabulary");
    return kTokenNames[id];
}

int token_id(const std::string& name) {
    for (int i = 0; i < kVocabSize; ++i)
        if (name == kTokenNames[i]) return i;
    throw std::invalid_argument("unknown token name '" + name + "'");
}

std::vector<int> parse_prompt(const std::string& comma_separated) {
    std::vector<int> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(token_id(cur));
            cur.clear();
        }
    };
    for (char c : comma_separated) {
        if (c == ',' || c == ' ') {
            flush();
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

std::vector<int> SceneSpec::caption() const {
    std::vector<int> out;
    for (const auto& p : primitives) {
        out.push_back(color_token(p.color_class));
        out.push_back(shape_token(p.shape_class));
    }
    return out;
}

std::pair<SceneSpec, GaussianCloud> generate_scene(uint64_t seed) {
    Rng rng(child_seed(seed, "scene"));
    SceneSpec spec;
    spec.seed = seed;
    const int n_prims = 1 + static_cast<int>(rng.randint(5));

    struct Splat {
        Vec3 p;
        double s[3];
        double q[4];
        double opa;
        double col[3];
    };
    std::vector<Splat> splats;

    for (int pi = 0; pi < n_prims; ++pi) {
        SceneSpec::Primitive prim;
        prim.shape_class = static_cast<int>(rng.randint(kNumShapes));
        prim.color_class = static_cast<int>(rng.randint(kNumColors));
        prim.size = rng.uniform(0.12, 0.3);
        const Vec3 dir = random_unit(rng);
        const double dist = rng.uniform(0.0, 0.45);
        prim.center = {dir[0] * dist, dir[1] * dist, dir[2] * dist};
        spec.primitives.push_back(prim);

        auto push_splat = [&](const Vec3& p, double base_scale) {
            Splat s;
            s.p = p;
            for (int k = 0; k < 3; ++k) s.s[k] = base_scale * rng.uniform(0.6, 1.4);
            double q[4] = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
            const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
            for (int k = 0; k < 4; ++k) s.q[k] = q[k] / std::max(qn, 1e-9);
            s.opa = rng.uniform(0.55, 0.95);
            for (int k = 0; k < 3; ++k)
                s.col[k] = std::clamp(
                    kPalette[prim.color_class][k] + rng.uniform(-0.08, 0.08), 0.05, 0.95);
            splats.push_back(s);
        };

        if (prim.shape_class == 0) {  // blob
            for (int i = 0; i < 36; ++i) {
                Vec3 off = {rng.normal() * prim.size * 0.4, rng.normal() * prim.size * 0.4,
                            rng.normal() * prim.size * 0.4};
                push_splat({prim.center[0] + off[0], prim.center[1] + off[1],
                            prim.center[2] + off[2]},
                           prim.size * 0.22);
            }
        } else if (prim.shape_class == 1) {  // ellipsoid shell
            const Vec3 axes = {prim.size * rng.uniform(0.6, 1.2),
                               prim.size * rng.uniform(0.6, 1.2),
                               prim.size * rng.uniform(0.6, 1.2)};
            for (int i = 0; i < 48; ++i) {
                const Vec3 u = random_unit(rng);
                push_splat({prim.center[0] + axes[0] * u[0], prim.center[1] + axes[1] * u[1],
                            prim.center[2] + axes[2] * u[2]},
                           prim.size * 0.14);
            }
        } else {  // ring
            const Vec3 n = random_unit(rng);
            // Orthonormal frame around n.
            Vec3 a = std::abs(n[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
            Vec3 e1 = normalized(cross(n, a));
            Vec3 e2 = cross(n, e1);
            for (int i = 0; i < 44; ++i) {
                const double th = 2.0 * M_PI * i / 44 + rng.uniform(-0.05, 0.05);
                Vec3 p;
                for (int k = 0; k < 3; ++k)
                    p[static_cast<size_t>(k)] =
                        prim.center[static_cast<size_t>(k)] +
                        prim.size * (std::cos(th) * e1[static_cast<size_t>(k)] +
                                     std::sin(th) * e2[static_cast<size_t>(k)]);
                push_splat(p, prim.size * 0.13);
            }
        }
    }

    GaussianCloud cloud = GaussianCloud::with_size(static_cast<int>(splats.size()));
    for (size_t i = 0; i < splats.size(); ++i) {
        Splat& s = splats[i];
        // Unit-sphere bound: position norm + 3 * max scale <= 1.
        double pn = norm(s.p);
        const double max_s = std::max({s.s[0], s.s[1], s.s[2]});
        if (pn + 3 * max_s > 1.0) {
            const double shrink = std::max(0.0, (1.0 - 3 * max_s)) / std::max(pn, 1e-9);
            for (auto& c : s.p) c *= std::min(1.0, shrink);
        }
        const int r = static_cast<int>(i);
        for (int k = 0; k < 3; ++k) {
            cloud.positions.at2(r, k) = static_cast<float>(s.p[static_cast<size_t>(k)]);
            cloud.scales.at2(r, k) = static_cast<float>(s.s[k]);
            cloud.colors.at2(r, k) = static_cast<float>(s.col[k]);
        }
        for (int k = 0; k < 4; ++k) cloud.rotations.at2(r, k) = static_cast<float>(s.q[k]);
        cloud.opacities.v[i] = static_cast<float>(s.opa);
    }
    return {spec, cloud};
}

ViewSet render_viewset(const GaussianCloud& cloud, uint64_t seed, int resolution) {
    Rng rng(child_seed(seed, "viewset"));
    ViewSet vs;
    const int total = 36, inputs = 4;

    // Input cameras first: a jittered 90-degree fan keeps azimuths at least
    // 60 degrees apart; elevations stay within [-5, 5] degrees.
    const double a0 = rng.uniform(0, 2 * M_PI);
    for (int i = 0; i < inputs; ++i) {
        const double az = a0 + i * (M_PI / 2) + rng.uniform(-15 * kDeg, 15 * kDeg);
        const double el = rng.uniform(-5 * kDeg, 5 * kDeg);
        vs.cameras.push_back(orbit_camera(az, el, kOrbitRadius, resolution));
        vs.input_indices.push_back(i);
    }
    for (int i = inputs; i < total; ++i) {
        const double az = 2 * M_PI * (i - inputs) / (total - inputs) +
                          rng.uniform(-5 * kDeg, 5 * kDeg);
        const double el = rng.uniform(-30 * kDeg, 30 * kDeg);
        vs.cameras.push_back(orbit_camera(az, el, kOrbitRadius, resolution));
    }
    // 8 supervision views from the non-input pool.
    std::vector<int> pool;
    for (int i = inputs; i < total; ++i) pool.push_back(i);
    for (int i = 0; i < 8; ++i) {
        const size_t pick = rng.randint(pool.size());
        vs.supervision_indices.push_back(pool[pick]);
        pool.erase(pool.begin() + static_cast<long>(pick));
    }
    std::sort(vs.supervision_indices.begin(), vs.supervision_indices.end());

    vs.images = Tensor({total, 3, resolution, resolution});
    vs.masks = Tensor({total, resolution, resolution});
    for (int i = 0; i < total; ++i) {
        RenderOutput out = render(cloud, vs.cameras[static_cast<size_t>(i)], {1, 1, 1});
        std::copy_n(out.image.v.begin(), out.image.v.size(),
                    vs.images.v.begin() + static_cast<size_t>(i) * out.image.numel());
        std::copy_n(out.alpha_mask.v.begin(), out.alpha_mask.v.size(),
                    vs.masks.v.begin() + static_cast<size_t>(i) * out.alpha_mask.numel());
    }
    return vs;
}

Tensor ViewSet::view_image(int idx) const {
    const int h = images.dim(2), w = images.dim(3);
    Tensor out({3, h, w});
    std::copy_n(images.v.begin() + static_cast<size_t>(idx) * out.numel(), out.numel(),
                out.v.begin());
    return out;
}

Tensor ViewSet::view_mask(int idx) const {
    const int h = masks.dim(1), w = masks.dim(2);
    Tensor out({h, w});
    std::copy_n(masks.v.begin() + static_cast<size_t>(idx) * out.numel(), out.numel(),
                out.v.begin());
    return out;
}

Tensor perturb_views(const Tensor& views, const PerturbConfig& cfg, uint64_t seed) {
    if (views.rank() != 4 || views.dim(1) != 3)
        throw std::invalid_argument("perturb_views: expects [V,3,H,W]");
    if (cfg.hue_sigma < 0 || cfg.warp_px < 0 || cfg.noise_sigma < 0 || cfg.brightness_sigma < 0)
        throw std::invalid_argument("perturb_views: magnitudes must be >= 0");
    Tensor out = views;
    if (cfg.is_identity()) return out;

    const int v = views.dim(0), h = views.dim(2), w = views.dim(3);
    for (int vi = 0; vi < v; ++vi) {
        if (cfg.exempt_reference && vi == cfg.reference_slot) continue;
        Rng rng(child_seed(seed, "perturb", static_cast<uint64_t>(vi)));

        // Smooth sinusoidal warp.
        if (cfg.warp_px > 0) {
            const double p1 = rng.uniform(0, 2 * M_PI), p2 = rng.uniform(0, 2 * M_PI);
            const double p3 = rng.uniform(0, 2 * M_PI), p4 = rng.uniform(0, 2 * M_PI);
            Tensor warped({1, 3, h, w});
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double dx =
                        cfg.warp_px * std::sin(2 * M_PI * y / h + p1) *
                        std::cos(2 * M_PI * x / w + p2);
                    const double dy =
                        cfg.warp_px * std::sin(2 * M_PI * x / w + p3) *
                        std::cos(2 * M_PI * y / h + p4);
                    const double sx = std::clamp(x + dx, 0.0, w - 1.0);
                    const double sy = std::clamp(y + dy, 0.0, h - 1.0);
                    const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
                    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                    const double fx = sx - x0, fy = sy - y0;
                    for (int c = 0; c < 3; ++c) {
                        const auto pix = [&](int yy, int xx) {
                            return static_cast<double>(out.at4(vi, c, yy, xx));
                        };
                        warped.at4(0, c, y, x) = static_cast<float>(
                            (1 - fy) * ((1 - fx) * pix(y0, x0) + fx * pix(y0, x1)) +
                            fy * ((1 - fx) * pix(y1, x0) + fx * pix(y1, x1)));
                    }
                }
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < h * w; ++i)
                    out.v[((static_cast<size_t>(vi) * 3 + c) * h * w) + i] =
                        warped.v[(static_cast<size_t>(c) * h * w) + i];
        }

        // Hue rotation about the gray axis plus brightness jitter. hue_sigma
        // is in turns of the hue wheel (HSV convention), so 0.2 is a strong,
        // clearly visible per-view shift.
        const double theta = cfg.hue_sigma > 0 ? rng.normal() * cfg.hue_sigma * 2.0 * M_PI : 0.0;
        const double bright =
            cfg.brightness_sigma > 0 ? 1.0 + rng.normal() * cfg.brightness_sigma : 1.0;
        if (theta != 0.0 || bright != 1.0) {
            const double axis = 1.0 / std::sqrt(3.0);
            const double c = std::cos(theta), s = std::sin(theta);
            double rot[3][3];
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    rot[i][j] = (i == j ? c : 0.0) + (1 - c) * axis * axis;
            rot[0][1] += -s * axis; rot[0][2] += s * axis;
            rot[1][0] += s * axis;  rot[1][2] += -s * axis;
            rot[2][0] += -s * axis; rot[2][1] += s * axis;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double rgb[3];
                    for (int ci = 0; ci < 3; ++ci) rgb[ci] = out.at4(vi, ci, y, x);
                    for (int ci = 0; ci < 3; ++ci) {
                        const double mixed = rot[ci][0] * rgb[0] + rot[ci][1] * rgb[1] +
                                             rot[ci][2] * rgb[2];
                        out.at4(vi, ci, y, x) =
                            static_cast<float>(std::clamp(mixed * bright, 0.0, 1.0));
                    }
                }
        }

        if (cfg.noise_sigma > 0) {
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < h * w; ++i) {
                    float& px = out.v[((static_cast<size_t>(vi) * 3 + c) * h * w) + i];
                    px = static_cast<float>(
                        std::clamp(px + rng.normal() * cfg.noise_sigma, 0.0, 1.0));
                }
        }
    }
    return out;
}

Scene make_scene(uint64_t seed, int resolution) {
    Scene scene;
    scene.seed = seed;
    auto [spec, cloud] = generate_scene(seed);
    scene.spec = std::move(spec);
    scene.caption = scene.spec.caption();
    scene.cloud = std::move(cloud);
    scene.views = render_viewset(scene.cloud, seed, resolution);
    return scene;
}

void save_scene(const std::string& dir, const Scene& scene, bool png_export) {
    ensure_dir(dir);
    const int total = static_cast<int>(scene.views.cameras.size());
    Tensor cam_rot({total, 3, 3}), cam_trans({total, 3}), cam_focal({total});
    for (int i = 0; i < total; ++i) {
        const CameraPose& c = scene.views.cameras[static_cast<size_t>(i)];
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k)
                cam_rot.v[(static_cast<size_t>(i) * 3 + r) * 3 + k] =
                    static_cast<float>(c.rot[static_cast<size_t>(r)][static_cast<size_t>(k)]);
        for (int r = 0; r < 3; ++r)
            cam_trans.at2(i, r) = static_cast<float>(c.trans[static_cast<size_t>(r)]);
        cam_focal.v[static_cast<size_t>(i)] = static_cast<float>(c.focal);
    }
    auto idx_tensor = [](const std::vector<int>& v) {
        Tensor t({static_cast<int>(v.size())});
        for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<float>(v[i]);
        return t;
    };
    ftc_write(dir + "/data.ftc",
              {{"images", scene.views.images},
               {"masks", scene.views.masks},
               {"cam.rot", cam_rot},
               {"cam.trans", cam_trans},
               {"cam.focal", cam_focal},
               {"input_indices", idx_tensor(scene.views.input_indices)},
               {"supervision_indices", idx_tensor(scene.views.supervision_indices)},
               {"cloud.positions", scene.cloud.positions},
               {"cloud.scales", scene.cloud.scales},
               {"cloud.rotations", scene.cloud.rotations},
               {"cloud.opacities", scene.cloud.opacities},
               {"cloud.colors", scene.cloud.colors}});

    KvConfig meta;
    meta.set("seed", std::to_string(scene.seed));
    meta.set("resolution", std::to_string(scene.views.resolution()));
    meta.set("n_primitives", std::to_string(scene.spec.primitives.size()));
    std::string caption;
    for (int id : scene.caption) {
        if (!caption.empty()) caption += ",";
        caption += std::to_string(id);
    }
    meta.set("caption", caption);
    std::string caption_text;
    for (int id : scene.caption) {
        if (!caption_text.empty()) caption_text += " ";
        caption_text += token_name(id);
    }
    meta.set("caption_text", caption_text);
    for (size_t i = 0; i < scene.spec.primitives.size(); ++i) {
        const auto& p = scene.spec.primitives[i];
        meta.set("primitive" + std::to_string(i),
                 std::string(token_name(color_token(p.color_class))) + "," +
                     token_name(shape_token(p.shape_class)));
    }
    meta.write_file(dir + "/meta.kv");

    if (png_export) {
        const int res = scene.views.resolution();
        for (int i = 0; i < total; ++i) {
            Tensor img = scene.views.view_image(i);
            // [3,H,W] -> interleaved rows
            std::vector<float> rgb(static_cast<size_t>(res) * res * 3);
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x)
                    for (int c = 0; c < 3; ++c)
                        rgb[(static_cast<size_t>(y) * res + x) * 3 + c] =
                            img.v[(static_cast<size_t>(c) * res + y) * res + x];
            char name[32];
            std::snprintf(name, sizeof(name), "/view_%02d.png", i);
            png_write_rgb(dir + name, res, res, rgb.data());
        }
    }
}

Scene load_scene(const std::string& dir) {
    FtcMap m = ftc_read_map(dir + "/data.ftc");
    KvConfig meta = KvConfig::parse_file(dir + "/meta.kv");
    Scene scene;
    scene.seed = meta.get_uint("seed", 0);
    scene.views.images = m.get("images");
    scene.views.masks = m.get("masks");
    const Tensor& rot = m.get("cam.rot");
    const Tensor& trans = m.get("cam.trans");
    const Tensor& focal = m.get("cam.focal");
    const int total = rot.dim(0);
    const int res = scene.views.images.dim(2);
    for (int i = 0; i < total; ++i) {
        CameraPose c;
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k)
                c.rot[static_cast<size_t>(r)][static_cast<size_t>(k)] =
                    rot.v[(static_cast<size_t>(i) * 3 + r) * 3 + k];
        for (int r = 0; r < 3; ++r) c.trans[static_cast<size_t>(r)] = trans.at2(i, r);
        c.focal = focal.v[static_cast<size_t>(i)];
        c.height = c.width = res;
        c.cx = res * 0.5;
        c.cy = res * 0.5;
        scene.views.cameras.push_back(c);
    }
    auto idx_vec = [&](const char* name) {
        std::vector<int> out;
        for (float f : m.get(name).v) out.push_back(static_cast<int>(f));
        return out;
    };
    scene.views.input_indices = idx_vec("input_indices");
    scene.views.supervision_indices = idx_vec("supervision_indices");
    scene.cloud.positions = m.get("cloud.positions");
    scene.cloud.scales = m.get("cloud.scales");
    scene.cloud.rotations = m.get("cloud.rotations");
    scene.cloud.opacities = m.get("cloud.opacities");
    scene.cloud.colors = m.get("cloud.colors");
    const std::string cap = meta.get_str("caption", "");
    std::string cur;
    for (char ch : cap + ",") {
        if (ch == ',') {
            if (!cur.empty()) {
                scene.caption.push_back(std::stoi(cur));
                cur.clear();
            }
        } else {
            cur.push_back(ch);
        }
    }
    scene.spec.seed = scene.seed;
    return scene;
}

}  // namespace splatloop
