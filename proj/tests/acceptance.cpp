// Acceptance suite: one pass/fail line per criterion. Trains small shared
// checkpoints once (pretrained denoiser, then a tuned reconstructor plus a
// gate-frozen ablation twin) and runs every criterion at its stated
// tolerance. Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "splatloop/dataset.hpp"
#include "splatloop/gsplat.hpp"
#include "splatloop/io.hpp"
#include "splatloop/metrics.hpp"
#include "splatloop/pipeline.hpp"
#include "splatloop/scheduler.hpp"

using namespace splatloop;

namespace {

int g_failures = 0;

void report(int criterion, const char* name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion, name,
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double elapsed_s(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared toy-scale setup. Resolutions and widths are small so the suite runs
// on a couple of CPU cores; tolerances and counts below match the criteria.
constexpr int kRes = 16;
constexpr int kTrainScenes = 64;
constexpr int kPretrainSteps = 1600;
constexpr int kReconSteps = 3500;
constexpr int kReconTailSteps = 1500;  // low-rate fine-tuning tail
constexpr int kAblationSteps = 1200;   // paired twins for criterion 9

ModelConfig toy_config() {
    ModelConfig mc;
    mc.resolution = kRes;
    mc.width_denoiser = 16;
    mc.width_recon = 24;
    mc.heads = 4;
    mc.t_max = 1000;
    return mc;
}

std::vector<Scene> train_scenes() {
    std::vector<Scene> scenes;
    for (int i = 0; i < kTrainScenes; ++i)
        scenes.push_back(make_scene(child_seed(42, "ds", static_cast<uint64_t>(i)), kRes));
    return scenes;
}

void run_training(CycleModel& model, const std::vector<Scene>& scenes, uint64_t seed,
                  int steps, double lr, bool denoiser_only, bool frozen_2d, bool freeze_gates) {
    TrainConfig tc;
    tc.seed = seed;
    tc.lr = lr;
    tc.denoiser_only = denoiser_only;
    tc.frozen_2d = frozen_2d;
    tc.freeze_gates = freeze_gates;
    Trainer tr(model, tc);
    for (int s = 0; s < steps; ++s)
        tr.train_step(scenes[static_cast<size_t>(s) % scenes.size()]);
}

Tensor gather_input_views(const Scene& s, std::vector<CameraPose>* cams) {
    const int v = static_cast<int>(s.views.input_indices.size());
    const int res = s.views.resolution();
    Tensor out({v, 3, res, res});
    for (int i = 0; i < v; ++i) {
        const int idx = s.views.input_indices[static_cast<size_t>(i)];
        Tensor img = s.views.view_image(idx);
        std::copy_n(img.v.begin(), img.numel(), out.v.begin() + i * img.numel());
        if (cams) cams->push_back(s.views.cameras[static_cast<size_t>(idx)]);
    }
    return out;
}

double holdout_psnr(const GaussianCloud& cloud, const Scene& s) {
    double acc = 0;
    for (int idx : s.views.supervision_indices) {
        RenderOutput ro = render(cloud, s.views.cameras[static_cast<size_t>(idx)], {1, 1, 1});
        acc += psnr(ro.image, s.views.view_image(idx));
    }
    return acc / static_cast<double>(s.views.supervision_indices.size());
}

// -------------------------------------------------------------------------

void criterion_1_posterior_equivalence() {
    Rng rng(1001);
    double worst = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int rep = 0; rep < 1000; ++rep) {
        // Random (alpha_t, abar_{t-1}) with abar_t = alpha_t * abar_{t-1}.
        const double alpha_t = rng.uniform(0.5, 0.9999);
        const double ab_prev = rng.uniform(0.01, 0.9999);
        NoiseSchedule hand;
        hand.num_steps = 2;
        hand.betas = {1.0 - ab_prev, 1.0 - alpha_t};
        hand.alphas = {ab_prev, alpha_t};
        hand.alpha_bars = {ab_prev, alpha_t * ab_prev};
        const double xt = rng.uniform(-3, 3), x0 = rng.uniform(-3, 3);
        const double got = cycle_backward_scalar(hand, xt, x0, 2);
        // Independent posterior mean: standard DDPM q(x_{t-1} | x_t, x0).
        const double ab_t = alpha_t * ab_prev, beta_t = 1.0 - alpha_t;
        const double want = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t) * x0 +
                            std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t) * xt;
        worst = std::max(worst, std::abs(got - want) / std::max(1e-300, std::abs(want)));
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max rel err %.2e over 1000 tuples, %.2f s", worst,
                  elapsed_s(t0));
    report(1, "Eq.-4 posterior equivalence <= 1e-9", worst <= 1e-9 && elapsed_s(t0) < 1.0, buf);
}

void criterion_2_round_trip() {
    const NoiseSchedule ns = make_default_schedule(1000);
    Rng rng(1002);
    double worst = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int rep = 0; rep < 100; ++rep) {
        const int t = 1 + static_cast<int>(rng.randint(1000));
        DVec x0(3 * 16 * 16), eps(x0.size()), xt(x0.size()), rec(x0.size());
        for (auto& v : x0) v = rng.uniform(-1, 1);
        for (auto& v : eps) v = rng.normal();
        q_sample_span(ns, x0.data(), eps.data(), xt.data(),
                      static_cast<int64_t>(x0.size()), t);
        estimate_x0_span(ns, xt.data(), eps.data(), rec.data(),
                         static_cast<int64_t>(x0.size()), t);
        for (size_t i = 0; i < x0.size(); ++i)
            worst = std::max(worst, std::abs(rec[i] - x0[i]));
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max abs err %.2e over 100 tensors, %.2f s", worst,
                  elapsed_s(t0));
    report(2, "Eq.-1 round trip <= 1e-6", worst <= 1e-6 && elapsed_s(t0) < 1.0, buf);
}

void criterion_3_inversion_fidelity() {
    const NoiseSchedule ns = make_default_schedule(1000);
    const double mu0 = 0.35, sig0 = 0.4;
    DenoiseFn fn = [&](const DVec& x, int t) {
        const double ab = ns.alpha_bar(t);
        const double var = ab * sig0 * sig0 + (1.0 - ab);
        DVec e(x.size());
        for (size_t i = 0; i < x.size(); ++i)
            e[i] = std::sqrt(1.0 - ab) * (x[i] - std::sqrt(ab) * mu0) / var;
        return e;
    };
    Rng rng(1003);
    DVec x0(256);
    for (auto& v : x0) v = mu0 + sig0 * rng.normal();
    const auto t0 = std::chrono::steady_clock::now();
    const int steps = 50;
    DVec x = ddim_invert(ns, x0, fn, steps);
    const auto grid = uniform_step_grid(ns.num_steps, steps);
    for (size_t k = 0; k < grid.size(); ++k) {
        const int t = grid[k], t_prev = k + 1 < grid.size() ? grid[k + 1] : 0;
        DVec eps = fn(x, t), next(x.size());
        ddim_step_span(ns, x.data(), eps.data(), next.data(), static_cast<int64_t>(x.size()),
                       t, t_prev, 0.0);
        x = std::move(next);
    }
    double worst = 0;
    for (size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(x[i] - x0[i]));
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max abs err %.2e at 50 substeps, %.2f s", worst,
                  elapsed_s(t0));
    report(3, "DDIM inversion fidelity <= 1e-3", worst <= 1e-3 && elapsed_s(t0) < 10.0, buf);
}

void criterion_4_render_gradcheck() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(child_seed(1004, "scene", seed));
        const int n = 4 + static_cast<int>(rng.randint(7));  // 4..10
        GaussianCloud cloud = GaussianCloud::with_size(n);
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < 3; ++k) {
                cloud.positions.at2(i, k) = static_cast<float>(rng.uniform(-0.45, 0.45));
                cloud.scales.at2(i, k) = static_cast<float>(rng.uniform(0.03, 0.25));
                cloud.colors.at2(i, k) = static_cast<float>(rng.uniform(0.1, 0.9));
            }
            for (int k = 0; k < 4; ++k)
                cloud.rotations.at2(i, k) = static_cast<float>(rng.normal());
            cloud.opacities.v[static_cast<size_t>(i)] =
                static_cast<float>(rng.uniform(0.15, 0.85));
        }
        CameraPose cam = orbit_camera(rng.uniform(0, 6.28), rng.uniform(-0.4, 0.4), 1.5, 32);
        L2RenderLoss loss;
        RenderOutputD target = render_f64(cloud, cam, {0.5, 0.5, 0.5});
        for (auto& v : target.image) v += 0.05;  // nonzero residual everywhere
        loss.target_image = target.image;
        loss.target_mask = target.mask;
        worst = std::max(worst, render_gradcheck(cloud, cam, {1, 1, 1}, loss));
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "worst rel err %.2e over 20 scenes, %.1f s", worst,
                  elapsed_s(t0));
    report(4, "renderer gradient check < 1e-3", worst < 1e-3 && elapsed_s(t0) < 120.0, buf);
}

void criterion_5_zero_init() {
    nn::ParamStore ps;
    ReconstructorConfig rc;
    rc.input_size = kRes;
    rc.base_width = 16;
    rc.heads = 4;
    rc.feat_channels = {64, 32};
    Rng rng(1005);
    Reconstructor rec(ps, rc, rng);

    Rng vr(1006);
    Tensor views({4, 3, kRes, kRes});
    vr.fill_uniform(views, 0.0, 1.0);
    std::vector<CameraPose> cams;
    for (int i = 0; i < 4; ++i) cams.push_back(orbit_camera(i * 1.5, 0.1, 1.5, kRes));

    GaussianCloud a = rec.reconstruct(views, cams, {0, 0, 0, 0});
    GaussianCloud b = rec.reconstruct(views, cams, {700, 700, 700, 700});
    DenoiserFeatures feats;
    Tensor deep({4, 64, kRes / 4, kRes / 4}), shallow({4, 32, kRes / 2, kRes / 2});
    vr.fill_normal(deep);
    vr.fill_normal(shallow);
    feats.levels.push_back({4, deep});
    feats.levels.push_back({2, shallow});
    GaussianCloud c = rec.reconstruct(views, cams, {0, 0, 0, 0}, &feats);

    auto max_diff = [](const GaussianCloud& x, const GaussianCloud& y) {
        double worst = 0;
        auto cmp = [&](const Tensor& p, const Tensor& q) {
            for (int64_t i = 0; i < p.numel(); ++i)
                worst = std::max(worst, std::abs(static_cast<double>(p.v[static_cast<size_t>(i)]) -
                                                 q.v[static_cast<size_t>(i)]));
        };
        cmp(x.positions, y.positions);
        cmp(x.scales, y.scales);
        cmp(x.rotations, y.rotations);
        cmp(x.opacities, y.opacities);
        cmp(x.colors, y.colors);
        return worst;
    };
    const double dt = max_diff(a, b), df = max_diff(a, c);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "timestep diff %.2e, feature diff %.2e", dt, df);
    report(5, "zero-init equivalences <= 1e-6", dt <= 1e-6 && df <= 1e-6, buf);
}

void criterion_6_reference_cleanliness(const CycleModel& model) {
    bool all_clean = true;
    int total_steps = 0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Scene scene = make_scene(child_seed(1007, "refclean", seed), kRes);
        PriorProvider prior;
        prior.variant = PriorVariant::oracle_perturbed;
        prior.scene = &scene;
        prior.perturb.hue_sigma = 0.2;
        prior.perturb.warp_px = 2.0;
        Tensor ref = scene.views.view_image(scene.views.input_indices[0]);
        std::vector<double> ref_m(ref.v.size());
        for (size_t i = 0; i < ref.v.size(); ++i)
            ref_m[i] = 2.0 * static_cast<double>(ref.v[i]) - 1.0;
        SampleOptions opts;
        opts.mode = SampleMode::image_to_3d;
        opts.steps = 30;
        opts.cfg_scale = 1.0;
        opts.seed = seed;
        opts.prompt = scene.caption;
        opts.on_step = [&](const SampleTrace& trace) {
            ++total_steps;
            for (size_t i = 0; i < ref_m.size(); ++i)
                if ((*trace.x_state)[i] != ref_m[i]) {
                    all_clean = false;
                    return;
                }
        };
        sample(model, &ref, prior, opts);
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d steps probed across 5 seeds, bitwise", total_steps);
    report(6, "reference slot stays bitwise clean", all_clean && total_steps == 150, buf);
}

void criterion_7_cycle_identity(const CycleModel& model) {
    const NoiseSchedule& ns = model.schedule();
    Scene scene = make_scene(1008, kRes);
    PriorProvider prior;
    prior.variant = PriorVariant::oracle_perturbed;
    prior.scene = &scene;

    Tensor ref = scene.views.view_image(scene.views.input_indices[0]);
    SampleOptions opts;
    opts.mode = SampleMode::image_to_3d;
    opts.steps = 30;
    opts.cfg_scale = 1.0;
    opts.seed = 77;
    opts.reconstruct_override = [](const Tensor& x0, const std::vector<CameraPose>&, int) {
        return x0;  // substitute the rerender stage by the identity
    };
    std::vector<std::vector<double>> pipeline_states;
    opts.on_step = [&](const SampleTrace& trace) { pipeline_states.push_back(*trace.x_state); };
    SampleResult res = sample(model, &ref, prior, opts);

    // Independent plain posterior-mean sampler sharing the denoiser and the
    // [0,1] boundary casts, with its own coefficient algebra.
    const int v = static_cast<int>(res.cameras.size());
    const int64_t per_view = 3LL * kRes * kRes;
    std::vector<double> ref_m(ref.v.size());
    for (size_t i = 0; i < ref.v.size(); ++i)
        ref_m[i] = 2.0 * static_cast<double>(ref.v[i]) - 1.0;
    Tensor prior_views = gather_input_views(scene, nullptr);
    std::vector<double> x(prior_views.v.size());
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = 2.0 * static_cast<double>(prior_views.v[i]) - 1.0;
    std::copy(ref_m.begin(), ref_m.end(), x.begin());

    const auto grid = make_step_grid(ns.num_steps, opts.steps);
    // Inversion: exact inverse of the deterministic step via fixed point,
    // with the reference slot pinned clean (as the pipeline does).
    {
        std::vector<int> ascend;
        ascend.push_back(0);
        for (auto it = grid.rbegin(); it != grid.rend(); ++it) ascend.push_back(*it);
        std::copy(ref_m.begin(), ref_m.end(), x.begin());
        for (size_t s = 0; s + 1 < ascend.size(); ++s) {
            const int t_lo = ascend[s], t_hi = ascend[s + 1];
            const double ab_lo = ns.alpha_bar(t_lo), ab_hi = ns.alpha_bar(t_hi);
            const double lift = std::sqrt(ab_hi / ab_lo);
            const double ce_lo = std::sqrt(1 - ab_lo), ce_hi = std::sqrt(1 - ab_hi);
            auto eval_eps = [&](const std::vector<double>& state, int t) {
                Tensor xf({v, 3, kRes, kRes});
                for (size_t i = 0; i < state.size(); ++i)
                    xf.v[i] = static_cast<float>(state[i]);
                MultiViewBatch b;
                b.views = xf;
                b.per_view_t.assign(static_cast<size_t>(v), t);
                b.per_view_t[0] = 0;
                b.tokens.assign(static_cast<size_t>(v), {kNullToken});
                return model.denoiser().predict_noise(b, {1.0, kNullToken}, true);
            };
            Tensor e0 = eval_eps(x, t_lo);
            std::vector<double> xh(x.size());
            for (size_t i = 0; i < x.size(); ++i)
                xh[i] = lift * (x[i] - ce_lo * e0.v[i]) + ce_hi * e0.v[i];
            for (int it = 0; it < 4; ++it) {
                Tensor e = eval_eps(xh, t_hi);
                for (size_t i = 0; i < x.size(); ++i)
                    xh[i] = lift * (x[i] - ce_lo * e.v[i]) + ce_hi * e.v[i];
            }
            x = std::move(xh);
            std::copy(ref_m.begin(), ref_m.end(), x.begin());
        }
    }

    double worst = 0;
    for (size_t k = 0; k < grid.size(); ++k) {
        const int t = grid[k], t_prev = k + 1 < grid.size() ? grid[k + 1] : 0;
        Tensor xf({v, 3, kRes, kRes});
        for (size_t i = 0; i < x.size(); ++i) xf.v[i] = static_cast<float>(x[i]);
        MultiViewBatch b;
        b.views = xf;
        b.per_view_t.assign(static_cast<size_t>(v), t);
        b.per_view_t[0] = 0;
        b.tokens.assign(static_cast<size_t>(v), {kNullToken});
        Tensor eps = model.denoiser().predict_noise(b, {1.0, kNullToken}, true);
        for (int vi = 0; vi < v; ++vi) {
            const int tv = vi == 0 ? 0 : t;
            const double ab = ns.alpha_bar(tv), ab_prev = ns.alpha_bar(t_prev);
            const double alpha_eff = ab / ab_prev;
            const double on_x0 = std::sqrt(ab_prev) * (1 - alpha_eff) / (1 - ab);
            const double on_xt = std::sqrt(alpha_eff) * (1 - ab_prev) / (1 - ab);
            for (int64_t i = vi * per_view; i < (vi + 1) * per_view; ++i) {
                const double x0_hat =
                    (x[static_cast<size_t>(i)] -
                     std::sqrt(1 - ab) * eps.v[static_cast<size_t>(i)]) / std::sqrt(ab);
                const float c01 = static_cast<float>(0.5 * (x0_hat + 1.0));
                const double rr = 2.0 * static_cast<double>(c01) - 1.0;
                x[static_cast<size_t>(i)] = on_x0 * rr + on_xt * x[static_cast<size_t>(i)];
            }
        }
        std::copy(ref_m.begin(), ref_m.end(), x.begin());
        for (size_t i = 0; i < x.size(); ++i)
            worst = std::max(worst, std::abs(x[i] - pipeline_states[k][i]) /
                                        std::max(1.0, std::abs(x[i])));
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max step-for-step rel diff %.2e over 30 steps", worst);
    report(7, "cycle identity ablation <= 1e-9", worst <= 1e-9, buf);
}

void criterion_8_consistency_paired(const CycleModel& model) {
    const auto t0 = std::chrono::steady_clock::now();
    int cons_wins = 0, psnr_wins = 0;
    double mean_delta = 0;
    const int seeds = 20;
    for (int e = 0; e < seeds; ++e) {
        Scene scene = make_scene(child_seed(1009, "paired", static_cast<uint64_t>(e)), kRes);
        PriorProvider prior;
        prior.variant = PriorVariant::oracle_perturbed;
        prior.scene = &scene;
        prior.perturb.hue_sigma = 0.2;
        prior.perturb.warp_px = 2.0;
        // All prior views carry the inconsistency; the clean condition image
        // enters only through the cycle's pinned reference slot, mirroring
        // the paper's comparison against single-pass reconstruction.
        prior.perturb.exempt_reference = false;
        Tensor ref = scene.views.view_image(scene.views.input_indices[0]);

        SampleOptions opts;
        opts.mode = SampleMode::image_to_3d;
        opts.steps = 30;
        opts.cfg_scale = 1.0;
        opts.seed = 9000 + static_cast<uint64_t>(e);
        opts.prompt = scene.caption;
        opts.invert_fixpoint_iters = 4;
        SampleResult res = sample(model, &ref, prior, opts);
        const double cycle_psnr = holdout_psnr(res.cloud, scene);

        PriorProvider::Views pv = prior.make(opts.seed, kRes, opts.prompt);
        const Tensor& perturbed = pv.views01;
        GaussianCloud single = model.reconstructor().reconstruct(
            perturbed, pv.cameras, std::vector<int>(pv.cameras.size(), 0));
        const double single_psnr = holdout_psnr(single, scene);

        if (cycle_psnr >= single_psnr) ++psnr_wins;
        mean_delta += (cycle_psnr - single_psnr) / seeds;

        Tensor cycle_views({static_cast<int>(pv.cameras.size()), 3, kRes, kRes});
        for (size_t vi = 0; vi < pv.cameras.size(); ++vi) {
            RenderOutput ro = render(res.cloud, pv.cameras[vi], {1, 1, 1});
            std::copy_n(ro.image.v.begin(), ro.image.numel(),
                        cycle_views.v.begin() +
                            static_cast<int64_t>(vi) * ro.image.numel());
        }
        auto cons_cycle = consistency_error(cycle_views, pv.cameras, res.cloud);
        auto cons_prior = consistency_error(perturbed, pv.cameras, scene.cloud);
        if (cons_cycle && cons_prior && *cons_cycle < *cons_prior) ++cons_wins;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "consistency wins %d/%d, psnr wins %d/%d, mean delta %+.2f dB, %.0f s",
                  cons_wins, seeds, psnr_wins, seeds, mean_delta, elapsed_s(t0));
    const bool pass = cons_wins == seeds && psnr_wins >= (seeds * 7) / 10 && mean_delta > 0 &&
                      elapsed_s(t0) < 1800.0;
    report(8, "consistency-correction paired experiment", pass, buf);
}

void criterion_9_feature_interaction(const CycleModel& full, const CycleModel& ablated) {
    double psnr_full = 0, psnr_ablated = 0;
    const int eval_scenes = 8;
    for (int e = 0; e < eval_scenes; ++e) {
        Scene scene = make_scene(child_seed(1010, "ablation", static_cast<uint64_t>(e)), kRes);
        std::vector<CameraPose> cams;
        Tensor views = gather_input_views(scene, &cams);
        const std::vector<int> zeros(cams.size(), 0);
        // Evaluate through the full pipeline surface: clean views, features
        // from the (frozen, shared) denoiser at t=0.
        MultiViewBatch batch;
        batch.views = Tensor(views.shape);
        for (int64_t i = 0; i < views.numel(); ++i)
            batch.views.v[static_cast<size_t>(i)] =
                2.0f * views.v[static_cast<size_t>(i)] - 1.0f;
        batch.per_view_t = zeros;
        batch.tokens.assign(cams.size(), scene.caption);
        DenoiserFeatures feats_full, feats_abl;
        full.denoiser().predict_noise(batch, {1.0, kNullToken}, true, &feats_full);
        ablated.denoiser().predict_noise(batch, {1.0, kNullToken}, true, &feats_abl);
        psnr_full += holdout_psnr(
            full.reconstructor().reconstruct(views, cams, zeros, &feats_full), scene) /
            eval_scenes;
        psnr_ablated += holdout_psnr(
            ablated.reconstructor().reconstruct(views, cams, zeros, &feats_abl), scene) /
            eval_scenes;
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "full %.2f dB vs gate-frozen %.2f dB over %d scenes",
                  psnr_full, psnr_ablated, eval_scenes);
    report(9, "feature-interaction ablation (full >= ablated)", psnr_full >= psnr_ablated, buf);
}

void criterion_10_training_smoke() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Scene> scenes = train_scenes();
    CycleModel model(toy_config(), 4242);
    TrainConfig tc;
    tc.seed = 1011;
    tc.lr = 3e-4;
    Trainer trainer(model, tc);
    std::vector<double> losses;
    bool clip_active = false;
    for (int step = 0; step < 200; ++step) {
        TrainStepStats s = trainer.train_step(scenes[static_cast<size_t>(step % kTrainScenes)]);
        losses.push_back(s.loss_total);
        clip_active = clip_active || s.clipped;
    }
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += losses[static_cast<size_t>(i)] / 10;
        last += losses[losses.size() - 10 + static_cast<size_t>(i)] / 10;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "loss %.3f -> %.3f (ratio %.3f), clip active %s, %.0f s", first, last,
                  last / first, clip_active ? "yes" : "no", elapsed_s(t0));
    const bool pass = last <= 0.5 * first && clip_active && elapsed_s(t0) < 900.0;
    report(10, "training smoke: >= 50% loss drop, clipping active", pass, buf);
}

void criterion_11_cli_determinism(const std::string& work) {
    const std::string bin = SPLATLOOP_BIN;
    const std::string model_args = " width_denoiser=16 width_recon=16 heads=4 t_max=1000 ";
    auto run = [&](const std::string& args) {
        return std::system((bin + " " + args + " > /dev/null 2>&1").c_str());
    };
    bool ok = run("gen-data out=" + work + "/data n_scenes=1 resolution=16 seed=12") == 0;
    ok = ok && run("train out=" + work + "/tr dataset=" + work + "/data max_steps=1 seed=13" +
                   model_args) == 0;
    const std::string sample_args = "sample checkpoint=" + work +
                                    "/tr/ckpt_final.ftc resolution=16 scene=" + work +
                                    "/data/scene_0000 steps=6 cfg_scale=1 seed=14 "
                                    "hue_sigma=0.2 warp_px=2" + model_args;
    ok = ok && run(sample_args + " out=" + work + "/s1") == 0;
    ok = ok && run(sample_args + " out=" + work + "/s2") == 0;
    bool identical = false;
    if (ok) {
        const std::string a = read_text_file(work + "/s1/cloud.ply");
        const std::string b = read_text_file(work + "/s2/cloud.ply");
        identical = !a.empty() && a == b;
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "two cmd_sample runs, PLY bytes %s",
                  identical ? "identical" : "differ");
    report(11, "cmd_sample byte-identical PLY", ok && identical, buf);
}

}  // namespace

int main() {
    const auto suite_start = std::chrono::steady_clock::now();
    const std::string work = "acceptance_tmp";
    ensure_dir(work);

    criterion_1_posterior_equivalence();
    criterion_2_round_trip();
    criterion_3_inversion_fidelity();
    criterion_4_render_gradcheck();
    criterion_5_zero_init();

    // Development escape hatch: run only the closed-form criteria.
    if (std::getenv("ACCEPTANCE_FAST")) {
        std::printf("%d/5 fast criteria passed (ACCEPTANCE_FAST set; 6-11 skipped)\n",
                    5 - g_failures);
        return g_failures;
    }

    // Shared trained checkpoints: pretrained denoiser, a reconstructor tuned
    // against it (with a low-rate tail), and a paired full/gate-frozen twin
    // set for the feature-interaction ablation. Cached on disk so re-runs of
    // the suite skip the training phases.
    std::printf("-- setup: training shared toy checkpoints (%d den + %d+%d rec + 2x%d twins)\n",
                kPretrainSteps, kReconSteps, kReconTailSteps, kAblationSteps);
    std::fflush(stdout);
    std::vector<Scene> scenes = train_scenes();
    CycleModel model(toy_config(), 1);
    CycleModel nine_full(toy_config(), 1), nine_ablated(toy_config(), 1);
    const std::string ck_main = work + "/ck_main_v1.ftc";
    const std::string ck_den = work + "/ck_denoiser_v1.ftc";
    const std::string ck_nine_full = work + "/ck_nine_full_v1.ftc";
    const std::string ck_nine_abl = work + "/ck_nine_ablated_v1.ftc";
    if (file_exists(ck_main) && file_exists(ck_nine_full) && file_exists(ck_nine_abl)) {
        model.load_checkpoint(ck_main);
        nine_full.load_checkpoint(ck_nine_full);
        nine_ablated.load_checkpoint(ck_nine_abl);
        std::printf("-- setup: reusing cached checkpoints in %s\n", work.c_str());
    } else {
        run_training(model, scenes, 2, kPretrainSteps, 3e-4, true, false, false);
        model.save_checkpoint(ck_den, kPretrainSteps);
        run_training(model, scenes, 3, kReconSteps, 3e-4, false, true, false);
        run_training(model, scenes, 4, kReconTailSteps, 1e-4, false, true, false);
        model.save_checkpoint(ck_main, 0);
        nine_full.load_checkpoint(ck_den);
        nine_ablated.load_checkpoint(ck_den);
        run_training(nine_full, scenes, 5, kAblationSteps, 3e-4, false, true, false);
        run_training(nine_ablated, scenes, 5, kAblationSteps, 3e-4, false, true, true);
        nine_full.save_checkpoint(ck_nine_full, 0);
        nine_ablated.save_checkpoint(ck_nine_abl, 0);
    }
    std::printf("-- setup done (%.0f s)\n", elapsed_s(suite_start));
    std::fflush(stdout);

    criterion_6_reference_cleanliness(model);
    criterion_7_cycle_identity(model);
    criterion_8_consistency_paired(model);
    criterion_9_feature_interaction(nine_full, nine_ablated);
    criterion_10_training_smoke();
    criterion_11_cli_determinism(work);

    std::printf("%d/11 criteria passed (total %.0f s)\n", 11 - g_failures,
                elapsed_s(suite_start));
    return g_failures;
}
