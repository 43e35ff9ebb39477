#include "splatloop/scheduler.hpp"

#include <cmath>

namespace splatloop {

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end,
                            ScheduleKind kind) {
    if (num_steps < 1) throw std::invalid_argument("make_schedule: num_steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule ns;
    ns.num_steps = num_steps;
    ns.betas.resize(static_cast<size_t>(num_steps));
    ns.alphas.resize(static_cast<size_t>(num_steps));
    ns.alpha_bars.resize(static_cast<size_t>(num_steps));
    double running = 1.0;
    for (int i = 0; i < num_steps; ++i) {
        const double u = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
        double b;
        if (kind == ScheduleKind::linear) {
            b = beta_start + (beta_end - beta_start) * u;
        } else {
            const double rb = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * u;
            b = rb * rb;
        }
        ns.betas[static_cast<size_t>(i)] = b;
        ns.alphas[static_cast<size_t>(i)] = 1.0 - b;
        running *= 1.0 - b;
        ns.alpha_bars[static_cast<size_t>(i)] = running;
    }
    return ns;
}

BackwardCoeffs cycle_backward_coeffs(const NoiseSchedule& ns, int t, int t_prev) {
    if (t_prev < 0) t_prev = t - 1;
    ns.check_t(t);
    ns.check_t0(t_prev);
    if (t_prev >= t) throw std::invalid_argument("cycle_backward_step: t_prev must be < t");
    const double ab_t = ns.alpha_bar(t);
    const double ab_p = ns.alpha_bar(t_prev);
    const double alpha_eff = ab_t / ab_p;   // equals alpha_t for adjacent steps
    const double beta_eff = 1.0 - alpha_eff;
    BackwardCoeffs c;
    c.on_x0 = std::sqrt(ab_p) * beta_eff / (1.0 - ab_t);
    c.on_xt = std::sqrt(alpha_eff) * (1.0 - ab_p) / (1.0 - ab_t);
    return c;
}

Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, int t, const Tensor& eps) {
    check_same_shape(x0, eps, "q_sample");
    Tensor out(x0.shape);
    q_sample_span(ns, x0.data(), eps.data(), out.data(), out.numel(), t);
    return out;
}

Tensor estimate_x0(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps_pred, int t) {
    check_same_shape(x_t, eps_pred, "estimate_x0");
    Tensor out(x_t.shape);
    estimate_x0_span(ns, x_t.data(), eps_pred.data(), out.data(), out.numel(), t);
    return out;
}

Tensor cycle_backward_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& x0_rendered,
                           int t, int t_prev) {
    check_same_shape(x_t, x0_rendered, "cycle_backward_step");
    Tensor out(x_t.shape);
    cycle_backward_span(ns, x_t.data(), x0_rendered.data(), out.data(), out.numel(), t,
                        t_prev < 0 ? t - 1 : t_prev);
    return out;
}

Tensor ddim_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps_pred,
                 int t, int t_prev, double eta) {
    check_same_shape(x_t, eps_pred, "ddim_step");
    Tensor out(x_t.shape);
    ddim_step_span(ns, x_t.data(), eps_pred.data(), out.data(), out.numel(), t, t_prev, eta);
    return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale) {
    check_same_shape(eps_uncond, eps_cond, "cfg_combine");
    Tensor out(eps_uncond.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double u = eps_uncond.v[static_cast<size_t>(i)];
        const double c = eps_cond.v[static_cast<size_t>(i)];
        out.v[static_cast<size_t>(i)] = static_cast<float>(u + scale * (c - u));
    }
    return out;
}

double q_sample_scalar(const NoiseSchedule& ns, double x0, int t, double eps) {
    double out;
    q_sample_span(ns, &x0, &eps, &out, 1, t);
    return out;
}

double estimate_x0_scalar(const NoiseSchedule& ns, double x_t, double eps_pred, int t) {
    double out;
    estimate_x0_span(ns, &x_t, &eps_pred, &out, 1, t);
    return out;
}

double cycle_backward_scalar(const NoiseSchedule& ns, double x_t, double x0r, int t, int t_prev) {
    double out;
    cycle_backward_span(ns, &x_t, &x0r, &out, 1, t, t_prev < 0 ? t - 1 : t_prev);
    return out;
}

std::vector<int> uniform_step_grid(int num_steps, int steps) {
    if (steps < 1) throw std::invalid_argument("step grid: steps must be >= 1");
    if (steps > num_steps) throw std::invalid_argument("step grid: steps must be <= T");
    std::vector<int> grid(static_cast<size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        grid[static_cast<size_t>(k)] = static_cast<int>(
            std::llround(static_cast<double>(num_steps) * (steps - k) / steps));
    }
    // Rounding keeps entries distinct for any 1 <= steps <= T; enforce anyway.
    for (size_t i = 0; i + 1 < grid.size(); ++i)
        if (grid[i] <= grid[i + 1] || grid[i + 1] < 1)
            throw std::logic_error("step grid not strictly decreasing");
    return grid;
}

DVec ddim_invert_grid(const NoiseSchedule& ns, const DVec& x0, const DenoiseFn& denoiser,
                      const std::vector<int>& grid_desc, const InvertOptions& opt) {
    if (grid_desc.empty()) throw std::invalid_argument("ddim_invert: empty grid");
    // Ascend 0 -> grid.back() -> ... -> grid.front().
    std::vector<int> ascend;
    ascend.push_back(0);
    for (auto it = grid_desc.rbegin(); it != grid_desc.rend(); ++it) ascend.push_back(*it);

    DVec x = x0;
    if (opt.state_hook) opt.state_hook(x);
    const int64_t n = static_cast<int64_t>(x.size());
    for (size_t s = 0; s + 1 < ascend.size(); ++s) {
        const int t_lo = ascend[s], t_hi = ascend[s + 1];
        const double ab_lo = ns.alpha_bar(t_lo), ab_hi = ns.alpha_bar(t_hi);
        const double lift = std::sqrt(ab_hi / ab_lo);
        const double ce_lo = std::sqrt(1.0 - ab_lo), ce_hi = std::sqrt(1.0 - ab_hi);

        // Lagged initial guess, then refine to the exact inverse of ddim_step.
        DVec eps = denoiser(x, t_lo);
        DVec xh(x.size());
        for (int64_t i = 0; i < n; ++i)
            xh[static_cast<size_t>(i)] = lift * (x[static_cast<size_t>(i)] -
                                                 ce_lo * eps[static_cast<size_t>(i)]) +
                                         ce_hi * eps[static_cast<size_t>(i)];
        for (int it = 0; it < opt.fixpoint_iters; ++it) {
            DVec e = denoiser(xh, t_hi);
            double max_delta = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const double next = lift * (x[static_cast<size_t>(i)] -
                                            ce_lo * e[static_cast<size_t>(i)]) +
                                    ce_hi * e[static_cast<size_t>(i)];
                max_delta = std::max(max_delta, std::abs(next - xh[static_cast<size_t>(i)]));
                xh[static_cast<size_t>(i)] = next;
            }
            if (max_delta < opt.fixpoint_tol) break;
        }
        x = std::move(xh);
        if (opt.state_hook) opt.state_hook(x);
    }
    return x;
}

DVec ddim_invert(const NoiseSchedule& ns, const DVec& x0, const DenoiseFn& denoiser, int steps,
                 const InvertOptions& opt) {
    return ddim_invert_grid(ns, x0, denoiser, uniform_step_grid(ns.num_steps, steps), opt);
}

}  // namespace splatloop
