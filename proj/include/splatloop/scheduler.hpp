#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "splatloop/tensor.hpp"

namespace splatloop {

// All diffusion-time mathematics. Schedule quantities are kept in double so
// downstream identities (posterior equivalence, alpha_t * abar_{t-1} ==
// abar_t) hold to round-off; image-tensor wrappers apply the double
// coefficients elementwise. The convention abar(0) == 1 makes t == 0 mean
// "clean image" throughout the project.

enum class ScheduleKind { linear, scaled_linear };

struct NoiseSchedule {
    int num_steps = 0;                // T
    std::vector<double> betas;        // betas[t-1] for t in 1..T
    std::vector<double> alphas;       // 1 - beta
    std::vector<double> alpha_bars;   // running product

    double beta(int t) const { return betas.at(static_cast<size_t>(check_t(t) - 1)); }
    double alpha(int t) const { return alphas.at(static_cast<size_t>(check_t(t) - 1)); }
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        return alpha_bars.at(static_cast<size_t>(check_t(t) - 1));
    }

    int check_t(int t) const {
        if (t < 1 || t > num_steps)
            throw std::invalid_argument("timestep " + std::to_string(t) + " out of range [1," +
                                        std::to_string(num_steps) + "]");
        return t;
    }
    int check_t0(int t) const {  // variant allowing the clean-image step
        if (t < 0 || t > num_steps)
            throw std::invalid_argument("timestep " + std::to_string(t) + " out of range [0," +
                                        std::to_string(num_steps) + "]");
        return t;
    }
};

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end,
                            ScheduleKind kind = ScheduleKind::scaled_linear);

// Stock range of the schedule family this project defaults to.
inline NoiseSchedule make_default_schedule(int num_steps = 1000) {
    return make_schedule(num_steps, 0.00085, 0.012, ScheduleKind::scaled_linear);
}

struct GuidanceConfig {
    double scale = 3.0;
    int null_conditioning = 0;  // reserved NULL token id
};

// Coefficients of the deterministic backward step
//   x_prev = on_x0 * x0_hat' + on_xt * x_t
// generalized to arbitrary grid gaps via effective alpha = abar_t / abar_prev.
struct BackwardCoeffs {
    double on_x0 = 0.0;
    double on_xt = 0.0;
};
BackwardCoeffs cycle_backward_coeffs(const NoiseSchedule& ns, int t, int t_prev);

// ---------------------------------------------------------------------------
// Elementwise cores, usable for float tensors and for the double-precision
// sampler state. Arithmetic is double regardless of storage type.
// ---------------------------------------------------------------------------

template <class S1, class S2, class D>
void q_sample_span(const NoiseSchedule& ns, const S1* x0, const S2* eps, D* out, int64_t n, int t) {
    ns.check_t0(t);
    const double ab = ns.alpha_bar(t);
    const double c0 = std::sqrt(ab), ce = std::sqrt(1.0 - ab);
    for (int64_t i = 0; i < n; ++i)
        out[i] = static_cast<D>(c0 * static_cast<double>(x0[i]) +
                                ce * static_cast<double>(eps[i]));
}

template <class S1, class S2, class D>
void estimate_x0_span(const NoiseSchedule& ns, const S1* x_t, const S2* eps_pred, D* out,
                      int64_t n, int t) {
    ns.check_t0(t);
    const double ab = std::max(ns.alpha_bar(t), 1e-12);  // division guard
    const double inv = 1.0 / std::sqrt(ab), ce = std::sqrt(1.0 - ab);
    for (int64_t i = 0; i < n; ++i)
        out[i] = static_cast<D>((static_cast<double>(x_t[i]) -
                                 ce * static_cast<double>(eps_pred[i])) * inv);
}

template <class S1, class S2, class D>
void cycle_backward_span(const NoiseSchedule& ns, const S1* x_t, const S2* x0_rendered, D* out,
                         int64_t n, int t, int t_prev) {
    const BackwardCoeffs c = cycle_backward_coeffs(ns, t, t_prev);
    for (int64_t i = 0; i < n; ++i)
        out[i] = static_cast<D>(c.on_x0 * static_cast<double>(x0_rendered[i]) +
                                c.on_xt * static_cast<double>(x_t[i]));
}

template <class S1, class S2, class D>
void ddim_step_span(const NoiseSchedule& ns, const S1* x_t, const S2* eps_pred, D* out,
                    int64_t n, int t, int t_prev, double eta) {
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    ns.check_t(t);
    ns.check_t0(t_prev);
    if (eta < 0.0) throw std::invalid_argument("ddim_step: eta must be >= 0");
    const double ab_t = std::max(ns.alpha_bar(t), 1e-12);
    const double ab_p = ns.alpha_bar(t_prev);
    // Stochastic noise injection is out of scope; eta only shrinks the
    // direction term as in the deterministic limit of the update.
    const double sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) *
                         std::sqrt(std::max(0.0, 1.0 - ab_t / ab_p));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
    const double inv = 1.0 / std::sqrt(ab_t), ce = std::sqrt(1.0 - ab_t), c0 = std::sqrt(ab_p);
    for (int64_t i = 0; i < n; ++i) {
        const double e = static_cast<double>(eps_pred[i]);
        const double x0 = (static_cast<double>(x_t[i]) - ce * e) * inv;
        out[i] = static_cast<D>(c0 * x0 + dir * e);
    }
}

// ---------------------------------------------------------------------------
// Tensor wrappers (float storage).
// ---------------------------------------------------------------------------

Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, int t, const Tensor& eps);
Tensor estimate_x0(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps_pred, int t);
Tensor cycle_backward_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& x0_rendered,
                           int t, int t_prev = -1);  // -1 means t-1
Tensor ddim_step(const NoiseSchedule& ns, const Tensor& x_t, const Tensor& eps_pred,
                 int t, int t_prev, double eta = 0.0);
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale);

// Scalar helpers for oracle-style checks.
double q_sample_scalar(const NoiseSchedule& ns, double x0, int t, double eps);
double estimate_x0_scalar(const NoiseSchedule& ns, double x_t, double eps_pred, int t);
double cycle_backward_scalar(const NoiseSchedule& ns, double x_t, double x0r, int t,
                             int t_prev = -1);

// ---------------------------------------------------------------------------
// DDIM inversion. Walks the substep grid upward; each substep is refined by
// fixed-point iteration until it is the exact inverse of the matching
// ddim_step, so an invert-then-sample round trip cancels to the iteration
// residual instead of accumulating discretization error.
// ---------------------------------------------------------------------------

using DVec = std::vector<double>;
using DenoiseFn = std::function<DVec(const DVec& x, int t)>;

// Descending grid over [1, T], first entry T; the final transition lands on 0.
std::vector<int> uniform_step_grid(int num_steps, int steps);

struct InvertOptions {
    int fixpoint_iters = 12;
    double fixpoint_tol = 1e-12;
    // Applied to the state before the first substep and after every substep
    // (e.g. to pin a clean reference slot); the fixed point is solved under
    // whatever constraint the hook maintains on the previous state.
    std::function<void(DVec&)> state_hook;
};

DVec ddim_invert(const NoiseSchedule& ns, const DVec& x0, const DenoiseFn& denoiser, int steps,
                 const InvertOptions& opt = {});
DVec ddim_invert_grid(const NoiseSchedule& ns, const DVec& x0, const DenoiseFn& denoiser,
                      const std::vector<int>& grid_desc, const InvertOptions& opt = {});

}  // namespace splatloop
