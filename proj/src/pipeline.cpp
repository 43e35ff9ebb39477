#include "splatloop/pipeline.hpp"

#include <cmath>

#include "splatloop/io.hpp"

namespace splatloop {

using nn::Tape;
using nn::VarId;

namespace {

constexpr Vec3 kWhite = {1.0, 1.0, 1.0};

std::vector<double> to_model_space(const Tensor& img01) {
    std::vector<double> out(img01.v.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = 2.0 * static_cast<double>(img01.v[i]) - 1.0;
    return out;
}

Tensor to_float01(const std::vector<double>& model_space, const std::vector<int>& shape) {
    Tensor out(shape);
    for (size_t i = 0; i < model_space.size(); ++i)
        out.v[i] = static_cast<float>(0.5 * (model_space[i] + 1.0));
    return out;
}

Tensor cast_float(const std::vector<double>& x, const std::vector<int>& shape) {
    Tensor out(shape);
    for (size_t i = 0; i < x.size(); ++i) out.v[i] = static_cast<float>(x[i]);
    return out;
}

std::vector<CameraPose> canonical_orbit_cameras(int resolution) {
    std::vector<CameraPose> cams;
    for (int i = 0; i < 4; ++i)
        cams.push_back(orbit_camera(i * M_PI / 2.0, 0.0, 1.5, resolution));
    return cams;
}

}  // namespace

CycleModel::CycleModel(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_(cfg),
      schedule_(make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)) {
    Rng den_rng(child_seed(init_seed, "init.denoiser"));
    DenoiserConfig dc;
    dc.image_size = cfg.resolution;
    dc.base_width = cfg.width_denoiser;
    dc.heads = cfg.heads;
    dc.vocab_size = kVocabSize;
    denoiser_ = std::make_unique<Denoiser>(params_, dc, den_rng);

    Rng rec_rng(child_seed(init_seed, "init.reconstructor"));
    ReconstructorConfig rc;
    rc.input_size = cfg.resolution;
    rc.base_width = cfg.width_recon;
    rc.heads = cfg.heads;
    rc.feat_channels = denoiser_->feature_channels();
    recon_ = std::make_unique<Reconstructor>(params_, rc, rec_rng);
}

void CycleModel::save_checkpoint(const std::string& path, int64_t opt_step) const {
    const_cast<nn::ParamStore&>(params_).save_ftc(path + ".tmp", true, opt_step);
    // Append self-description.
    auto tensors = ftc_read(path + ".tmp");
    Tensor meta({7});
    meta.v = {static_cast<float>(cfg_.resolution), static_cast<float>(cfg_.width_denoiser),
              static_cast<float>(cfg_.width_recon), static_cast<float>(cfg_.heads),
              static_cast<float>(cfg_.t_max), static_cast<float>(cfg_.beta_start * 1e6),
              static_cast<float>(cfg_.beta_end * 1e6)};
    tensors.push_back({"meta.arch", meta});
    ftc_write(path, tensors);
    std::remove((path + ".tmp").c_str());
}

int64_t CycleModel::load_checkpoint(const std::string& path) {
    FtcMap m = ftc_read_map(path);
    if (const Tensor* meta = m.find("meta.arch")) {
        auto expect = [&](int idx, double want, const char* what) {
            if (std::abs(meta->v[static_cast<size_t>(idx)] - want) > 0.5)
                throw ConfigError(
                    std::string("checkpoint/config mismatch: ") + what + " is " +
                    std::to_string(static_cast<int>(meta->v[static_cast<size_t>(idx)])) +
                    " in checkpoint, " + std::to_string(static_cast<int>(want)) +
                    " in config");
        };
        expect(0, cfg_.resolution, "resolution");
        expect(1, cfg_.width_denoiser, "width_denoiser");
        expect(2, cfg_.width_recon, "width_recon");
        expect(3, cfg_.heads, "heads");
        expect(4, cfg_.t_max, "t_max");
    }
    return params_.load_ftc(path);
}

std::vector<int> make_step_grid(int t_max, int steps) { return uniform_step_grid(t_max, steps); }

double compute_loss(const std::vector<RenderOutput>& renders,
                    const std::vector<Tensor>& gt_images, const std::vector<Tensor>& gt_masks,
                    double lambda_perceptual) {
    if (renders.size() != gt_images.size() || renders.size() != gt_masks.size())
        throw std::invalid_argument("compute_loss: render/ground-truth count mismatch");
    const PerceptualNet& perc = shared_perceptual_net();
    double total = 0;
    for (size_t i = 0; i < renders.size(); ++i) {
        check_same_shape(renders[i].image, gt_images[i], "compute_loss image");
        check_same_shape(renders[i].alpha_mask, gt_masks[i], "compute_loss mask");
        double img_mse = 0;
        for (int64_t k = 0; k < renders[i].image.numel(); ++k) {
            const double d = static_cast<double>(renders[i].image.v[static_cast<size_t>(k)]) -
                             gt_images[i].v[static_cast<size_t>(k)];
            img_mse += d * d;
        }
        img_mse /= static_cast<double>(renders[i].image.numel());
        double mask_mse = 0;
        for (int64_t k = 0; k < renders[i].alpha_mask.numel(); ++k) {
            const double d =
                static_cast<double>(renders[i].alpha_mask.v[static_cast<size_t>(k)]) -
                gt_masks[i].v[static_cast<size_t>(k)];
            mask_mse += d * d;
        }
        mask_mse /= static_cast<double>(renders[i].alpha_mask.numel());
        total += img_mse + lambda_perceptual * perc.distance(renders[i].image, gt_images[i]) +
                 mask_mse;
    }
    return total;
}

Trainer::Trainer(CycleModel& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
    nn::AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;
    opt_ = nn::AdamW(oc);
    model_.set_frozen_denoiser(cfg.frozen_2d);
    if (cfg.freeze_gates) {
        model_.params().set_frozen("rec.cross1.gate", true);
        model_.params().set_frozen("rec.cross2.gate", true);
    }
}

TrainStepStats Trainer::train_step(const Scene& scene) {
    try {
        return train_step_impl(scene);
    } catch (const std::exception& e) {
        // No silent NaN propagation: a failed forward (for example from
        // non-finite inputs producing an invalid cloud) aborts the step.
        model_.params().zero_grads();
        TrainStepStats stats;
        stats.aborted_non_finite = true;
        stats.abort_reason = e.what();
        return stats;
    }
}

TrainStepStats Trainer::train_step_impl(const Scene& scene) {
    // Every draw comes from a per-step child seed, so a resumed run replays
    // the interrupted run exactly.
    Rng rng(child_seed(cfg_.seed, "trainstep", static_cast<uint64_t>(opt_.step_count)));
    const NoiseSchedule& ns = model_.schedule();
    const int res = model_.config().resolution;
    if (scene.views.resolution() != res)
        throw std::invalid_argument("train_step: scene resolution mismatch with model");
    const auto& in_idx = scene.views.input_indices;
    const int v = static_cast<int>(in_idx.size());

    // Supervision set: the 4 input poses plus the 8 extra views.
    std::vector<int> sup_idx = in_idx;
    for (int i : scene.views.supervision_indices) sup_idx.push_back(i);

    // Noising per Alg. 1: one t per batch, reference view kept clean with
    // probability 1 - reference_noisy_prob.
    const int t = 1 + static_cast<int>(rng.randint(static_cast<uint64_t>(ns.num_steps)));
    const bool ref_noisy = rng.uniform() < cfg_.reference_noisy_prob;
    std::vector<int> t_vec(static_cast<size_t>(v), t);
    if (!ref_noisy) t_vec[0] = 0;

    const bool drop_prompt = rng.uniform() < cfg_.prompt_dropout;
    std::vector<std::vector<int>> tokens(
        static_cast<size_t>(v),
        drop_prompt ? std::vector<int>{kNullToken}
                    : (scene.caption.empty() ? std::vector<int>{kNullToken} : scene.caption));

    // x0 in model space and its noised version.
    Tensor x0_m({v, 3, res, res});
    for (int vi = 0; vi < v; ++vi) {
        Tensor img = scene.views.view_image(in_idx[static_cast<size_t>(vi)]);
        for (int64_t k = 0; k < img.numel(); ++k)
            x0_m.v[static_cast<size_t>(vi) * img.numel() + k] =
                2.0f * img.v[static_cast<size_t>(k)] - 1.0f;
    }
    Tensor eps({v, 3, res, res});
    rng.fill_normal(eps);
    Tensor x_t(x0_m.shape);
    const int64_t per_view = 3LL * res * res;
    for (int vi = 0; vi < v; ++vi)
        q_sample_span(ns, x0_m.data() + vi * per_view, eps.data() + vi * per_view,
                      x_t.data() + vi * per_view, per_view, t_vec[static_cast<size_t>(vi)]);

    std::vector<CameraPose> in_cams;
    for (int i : in_idx) in_cams.push_back(scene.views.cameras[static_cast<size_t>(i)]);

    Tape tape;
    VarId x_t_var = tape.constant(x_t);
    std::vector<VarId> feats;
    VarId eps_hat = model_.denoiser().forward(tape, x_t_var, t_vec, tokens,
                                              cfg_.train_ref_injection, 0, &feats);

    TrainStepStats out;
    if (cfg_.denoiser_only) {
        VarId loss = tape.mse(eps_hat, tape.constant(eps));
        out.loss_eps = tape.val(loss).v[0];
        out.loss_total = out.loss_eps;
        if (!std::isfinite(out.loss_total)) {
            out.aborted_non_finite = true;
            model_.params().zero_grads();
            return out;
        }
        tape.backward(loss);
        auto params = model_.params().all();
        std::vector<nn::Param*> den_params;
        for (auto* p : params)
            if (p->name.rfind("den.", 0) == 0) den_params.push_back(p);
        auto gs = opt_.step(den_params, cfg_.grad_clip_norm);
        model_.params().zero_grads();
        out.grad_norm = gs.grad_norm;
        out.clipped = gs.clipped;
        return out;
    }

    // x0_hat per view (Eq. 1 on tape), then [0,1] conversion.
    std::vector<double> inv_sqrt_ab(static_cast<size_t>(v)), noise_coef(static_cast<size_t>(v));
    for (int vi = 0; vi < v; ++vi) {
        const double ab = std::max(ns.alpha_bar(t_vec[static_cast<size_t>(vi)]), 1e-12);
        inv_sqrt_ab[static_cast<size_t>(vi)] = 1.0 / std::sqrt(ab);
        noise_coef[static_cast<size_t>(vi)] = std::sqrt(1.0 - ab) / std::sqrt(ab);
    }
    VarId x0_hat_m = tape.add_scaled(tape.scale_per_n(x_t_var, inv_sqrt_ab),
                                     tape.scale_per_n(eps_hat, noise_coef), 1.0, -1.0);
    VarId x0_hat01 = tape.affine(x0_hat_m, 0.5, 0.5);

    CloudVars cloud =
        model_.reconstructor().forward(tape, x0_hat01, in_cams, t_vec, feats);

    const PerceptualNet& perc = shared_perceptual_net();
    VarId loss_img = -1, loss_mask = -1;
    for (int si : sup_idx) {
        const CameraPose& cam = scene.views.cameras[static_cast<size_t>(si)];
        VarId rgbm = tape.render_splats(cloud.positions, cloud.scales, cloud.rotations,
                                        cloud.opacities, cloud.colors, cam, kWhite, {});
        VarId img = tape.slice(rgbm, 0, 0, 3);
        VarId mask = tape.reshape(tape.slice(rgbm, 0, 3, 4), {res, res});
        Tensor gt_img = scene.views.view_image(si);
        Tensor gt_mask = scene.views.view_mask(si);
        VarId li = tape.mse(img, tape.constant(gt_img));
        VarId lp = perc.distance(tape, tape.reshape(img, {1, 3, res, res}),
                                 tape.reshape(tape.constant(gt_img), {1, 3, res, res}));
        li = tape.add_scaled(li, lp, 1.0, cfg_.lambda_perceptual);
        VarId lm = tape.mse(mask, tape.constant(gt_mask));
        loss_img = loss_img < 0 ? li : tape.add(loss_img, li);
        loss_mask = loss_mask < 0 ? lm : tape.add(loss_mask, lm);
    }
    VarId loss_render = tape.add(loss_img, loss_mask);

    // Joint-mode denoiser objective over the noised views.
    VarId loss = loss_render;
    if (!cfg_.frozen_2d && cfg_.eps_loss_weight > 0) {
        VarId pred = eps_hat, target = tape.constant(eps);
        if (!ref_noisy) {
            pred = tape.slice(eps_hat, 0, 1, v);
            target = tape.slice(target, 0, 1, v);
        }
        VarId leps = tape.mse(pred, target);
        out.loss_eps = tape.val(leps).v[0];
        loss = tape.add_scaled(loss_render, leps, 1.0, cfg_.eps_loss_weight);
    }

    out.loss_img = tape.val(loss_img).v[0];
    out.loss_mask = tape.val(loss_mask).v[0];
    out.loss_total = tape.val(loss_render).v[0];
    if (!std::isfinite(tape.val(loss).v[0])) {
        out.aborted_non_finite = true;
        model_.params().zero_grads();
        return out;
    }
    tape.backward(loss);
    auto gs = opt_.step(model_.params().trainable(), cfg_.grad_clip_norm);
    model_.params().zero_grads();
    out.grad_norm = gs.grad_norm;
    out.clipped = gs.clipped;
    return out;
}

// ---------------------------------------------------------------------------

PriorProvider::Views PriorProvider::make(uint64_t seed, int resolution,
                                         const std::vector<int>& prompt) const {
    Views out;
    if (variant == PriorVariant::oracle_perturbed) {
        if (!scene) throw std::invalid_argument("oracle prior requires a source scene");
        const auto& in_idx = scene->views.input_indices;
        const int v = static_cast<int>(in_idx.size());
        const int res = scene->views.resolution();
        out.views01 = Tensor({v, 3, res, res});
        for (int vi = 0; vi < v; ++vi) {
            Tensor img = scene->views.view_image(in_idx[static_cast<size_t>(vi)]);
            std::copy_n(img.v.begin(), img.numel(),
                        out.views01.v.begin() + static_cast<size_t>(vi) * img.numel());
            out.cameras.push_back(scene->views.cameras[static_cast<size_t>(in_idx
                                                           [static_cast<size_t>(vi)])]);
        }
        out.views01 = perturb_views(out.views01, perturb, child_seed(seed, "prior.perturb"));
        return out;
    }
    if (variant == PriorVariant::learned_multiview) {
        if (!prior_model)
            throw std::invalid_argument("learned_multiview prior requires a prior model");
        const int res = prior_model->config().resolution;
        out.cameras = canonical_orbit_cameras(res);
        const int v = static_cast<int>(out.cameras.size());
        const NoiseSchedule& ns = prior_model->schedule();
        Rng rng(child_seed(seed, "prior.noise"));
        Tensor x({v, 3, res, res});
        rng.fill_normal(x);
        const auto grid = make_step_grid(ns.num_steps, prior_steps);
        std::vector<std::vector<int>> tokens(
            static_cast<size_t>(v),
            prompt.empty() ? std::vector<int>{kNullToken} : prompt);
        for (size_t k = 0; k < grid.size(); ++k) {
            const int t = grid[k];
            const int t_prev = k + 1 < grid.size() ? grid[k + 1] : 0;
            MultiViewBatch batch;
            batch.views = x;
            batch.per_view_t.assign(static_cast<size_t>(v), t);
            batch.tokens = tokens;
            Tensor eps = prior_model->denoiser().predict_noise(batch, {1.0, kNullToken}, false);
            x = ddim_step(ns, x, eps, t, t_prev, 0.0);
        }
        out.views01 = Tensor(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i)
            out.views01.v[static_cast<size_t>(i)] = std::clamp(
                0.5f * (x.v[static_cast<size_t>(i)] + 1.0f), 0.0f, 1.0f);
        return out;
    }
    // pure_noise: no prior views; the sampler starts from Gaussian noise.
    out.cameras = canonical_orbit_cameras(resolution);
    return out;
}

SampleResult sample(const CycleModel& model, const Tensor* input_image01,
                    const PriorProvider& prior, const SampleOptions& opts) {
    const NoiseSchedule& ns = model.schedule();
    const int res = model.config().resolution;
    if (opts.steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
    if (opts.mode == SampleMode::image_to_3d && !input_image01)
        throw std::invalid_argument("image_to_3d sampling requires an input image");

    PriorProvider::Views pv = prior.make(opts.seed, res, opts.prompt);
    const std::vector<CameraPose>& cams = pv.cameras;
    const int v = static_cast<int>(cams.size());
    if (v < 2) throw std::invalid_argument("sample: need at least 2 working views");
    const int64_t per_view = 3LL * res * res;
    const int64_t total = v * per_view;

    // Reference view in model space; pinned into the state every step.
    std::vector<double> ref_m;
    if (opts.mode == SampleMode::image_to_3d) {
        if (input_image01->shape != std::vector<int>{3, res, res})
            throw std::invalid_argument("sample: input image resolution mismatch");
        ref_m = to_model_space(*input_image01);
    }

    // Per-view conditioning with optional per-view overrides.
    std::vector<std::vector<int>> tokens(
        static_cast<size_t>(v), opts.prompt.empty() ? std::vector<int>{kNullToken} : opts.prompt);
    for (const auto& [view, override_tokens] : opts.per_view_prompts) {
        if (view < 0 || view >= v)
            throw std::invalid_argument("per-view prompt override: view index out of range");
        tokens[static_cast<size_t>(view)] = override_tokens;
    }

    const GuidanceConfig guidance{opts.cfg_scale, kNullToken};

    auto predict = [&](const Tensor& x, const std::vector<int>& t_vec,
                       DenoiserFeatures* feats) {
        MultiViewBatch batch;
        batch.views = x;
        batch.per_view_t = t_vec;
        batch.cameras = cams;
        batch.tokens = tokens;
        batch.reference_index = 0;
        return model.denoiser().predict_noise(batch, guidance, opts.ref_injection, feats);
    };

    // Initial state: DDIM inversion of the prior (or pure noise).
    std::vector<double> x_state(static_cast<size_t>(total));
    if (prior.variant == PriorVariant::pure_noise) {
        Rng rng(child_seed(opts.seed, "sample.noise"));
        for (auto& e : x_state) e = rng.normal();
    } else {
        std::vector<double> prior_m = to_model_space(pv.views01);
        // In image mode the reference slot is kept clean during inversion as
        // well, so the denoiser evaluations match the sampling loop's.
        DenoiseFn fn = [&](const DVec& xd, int t) {
            Tensor xf = cast_float(xd, {v, 3, res, res});
            std::vector<int> t_vec(static_cast<size_t>(v), t);
            if (opts.mode == SampleMode::image_to_3d) t_vec[0] = 0;
            Tensor e = predict(xf, t_vec, nullptr);
            return DVec(e.v.begin(), e.v.end());
        };
        InvertOptions io;
        io.fixpoint_iters = opts.invert_fixpoint_iters;
        if (opts.mode == SampleMode::image_to_3d)
            io.state_hook = [&](DVec& state) {
                std::copy(ref_m.begin(), ref_m.end(), state.begin());
            };
        x_state = ddim_invert_grid(ns, prior_m, fn, make_step_grid(ns.num_steps, opts.steps),
                                   io);
    }
    // In image mode the reference slot stays pinned to the clean input; the
    // invariant is re-established after every state change.
    auto pin_reference = [&] {
        if (opts.mode == SampleMode::image_to_3d)
            std::copy(ref_m.begin(), ref_m.end(), x_state.begin());
    };
    pin_reference();

    const auto grid = make_step_grid(ns.num_steps, opts.steps);
    Tensor last_x0_hat01;
    DenoiserFeatures last_feats;
    std::vector<int> last_t_vec;

    for (size_t k = 0; k < grid.size(); ++k) {
        const int t = grid[k];
        const int t_prev = k + 1 < grid.size() ? grid[k + 1] : 0;

        std::vector<int> t_vec(static_cast<size_t>(v), t);
        if (opts.mode == SampleMode::image_to_3d) t_vec[0] = 0;

        Tensor x_f = cast_float(x_state, {v, 3, res, res});
        DenoiserFeatures feats;
        Tensor eps_pred = predict(x_f, t_vec, &feats);

        // Eq. 1 per view in double.
        std::vector<double> x0_hat_m(static_cast<size_t>(total));
        for (int vi = 0; vi < v; ++vi)
            estimate_x0_span(ns, x_state.data() + vi * per_view,
                             eps_pred.data() + vi * per_view,
                             x0_hat_m.data() + vi * per_view, per_view,
                             t_vec[static_cast<size_t>(vi)]);
        Tensor x0_hat01 = to_float01(x0_hat_m, {v, 3, res, res});

        // Reconstruct and rerender from the same observing views.
        Tensor x0_rr01;
        if (opts.reconstruct_override) {
            x0_rr01 = opts.reconstruct_override(x0_hat01, cams, t);
        } else {
            GaussianCloud cloud =
                model.reconstructor().reconstruct(x0_hat01, cams, t_vec, &feats);
            x0_rr01 = Tensor({v, 3, res, res});
            for (int vi = 0; vi < v; ++vi) {
                RenderOutput ro = render(cloud, cams[static_cast<size_t>(vi)], kWhite);
                std::copy_n(ro.image.v.begin(), per_view,
                            x0_rr01.v.begin() + static_cast<size_t>(vi * per_view));
            }
        }

        // Deterministic backward step (double state).
        std::vector<double> next(static_cast<size_t>(total));
        const BackwardCoeffs bc = cycle_backward_coeffs(ns, t, t_prev);
        for (int64_t i = 0; i < total; ++i) {
            const double rr_m = 2.0 * static_cast<double>(x0_rr01.v[static_cast<size_t>(i)]) -
                                1.0;
            next[static_cast<size_t>(i)] =
                bc.on_x0 * rr_m + bc.on_xt * x_state[static_cast<size_t>(i)];
        }
        x_state = std::move(next);
        pin_reference();

        last_x0_hat01 = x0_hat01;
        last_feats = std::move(feats);
        last_t_vec = t_vec;

        if (opts.on_step) {
            SampleTrace trace;
            trace.step_index = static_cast<int>(k);
            trace.t = t;
            trace.t_prev = t_prev;
            trace.x_state = &x_state;
            trace.x0_hat01 = x0_hat01;
            trace.x0_rerendered01 = x0_rr01;
            opts.on_step(trace);
        }
        for (double e : x_state)
            if (!std::isfinite(e))
                throw std::runtime_error("sample: non-finite state at t=" + std::to_string(t));
    }

    SampleResult result;
    result.cameras = cams;
    result.final_views01 = to_float01(x_state, {v, 3, res, res});

    // Final reconstruction at t = 0 from the last clean estimate.
    std::vector<int> zeros(static_cast<size_t>(v), 0);
    if (opts.reconstruct_override) {
        result.cloud = GaussianCloud::empty();
    } else {
        result.cloud =
            model.reconstructor().reconstruct(last_x0_hat01, cams, zeros, &last_feats);
    }
    return result;
}

}  // namespace splatloop
