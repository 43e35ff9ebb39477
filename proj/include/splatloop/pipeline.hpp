#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>

#include "splatloop/dataset.hpp"
#include "splatloop/denoiser.hpp"
#include "splatloop/metrics.hpp"
#include "splatloop/reconstructor.hpp"
#include "splatloop/scheduler.hpp"

namespace splatloop {

// Architecture knobs; stored inside checkpoints so they are self-describing.
struct ModelConfig {
    int resolution = 64;
    int width_denoiser = 64;
    int width_recon = 64;
    int heads = 4;
    int t_max = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    ScheduleKind schedule_kind = ScheduleKind::scaled_linear;
};

// Denoiser + reconstructor + schedule behind one parameter store.
class CycleModel {
  public:
    CycleModel(const ModelConfig& cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const Denoiser& denoiser() const { return *denoiser_; }
    const Reconstructor& reconstructor() const { return *recon_; }
    nn::ParamStore& params() { return params_; }

    void set_frozen_denoiser(bool frozen) { params_.set_frozen("den.", frozen); }

    void save_checkpoint(const std::string& path, int64_t opt_step = 0) const;
    int64_t load_checkpoint(const std::string& path);  // returns optimizer step

  private:
    ModelConfig cfg_;
    NoiseSchedule schedule_;
    nn::ParamStore params_;
    std::unique_ptr<Denoiser> denoiser_;
    std::unique_ptr<Reconstructor> recon_;
};

// Descending substep grid; first entry is T, the last transition lands on 0.
std::vector<int> make_step_grid(int t_max, int steps);

// Eq. 2/3 with mean-per-element norms: sum over views of
//   mse(image) + lambda * perceptual + mse(mask).
double compute_loss(const std::vector<RenderOutput>& renders,
                    const std::vector<Tensor>& gt_images, const std::vector<Tensor>& gt_masks,
                    double lambda_perceptual);

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 0.05;
    int epochs = 30;
    double grad_clip_norm = 1.0;
    double lambda_perceptual = 0.5;
    double prompt_dropout = 0.30;
    double reference_noisy_prob = 0.30;
    uint64_t seed = 0;
    bool frozen_2d = false;        // paper-faithful: tune the reconstructor only
    bool denoiser_only = false;    // pretrain phase: epsilon objective only
    double eps_loss_weight = 1.0;  // joint-mode denoiser objective weight
    bool train_ref_injection = true;
    bool freeze_gates = false;     // ablation: pin feature-interaction gates at 0
};

struct TrainStepStats {
    double loss_total = 0;  // Eq. 2 render loss
    double loss_img = 0;
    double loss_mask = 0;
    double loss_eps = 0;
    double grad_norm = 0;
    bool clipped = false;
    bool aborted_non_finite = false;  // non-finite loss or failed forward; no update applied
    std::string abort_reason;
};

class Trainer {
  public:
    Trainer(CycleModel& model, const TrainConfig& cfg);

    TrainStepStats train_step(const Scene& scene);
    int64_t steps_done() const { return opt_.step_count; }
    nn::AdamW& optimizer() { return opt_; }

  private:
    TrainStepStats train_step_impl(const Scene& scene);

    CycleModel& model_;
    TrainConfig cfg_;
    nn::AdamW opt_;
};

// ---------------------------------------------------------------------------
// Sampling (generation-reconstruction cycle).
// ---------------------------------------------------------------------------

enum class PriorVariant { oracle_perturbed, learned_multiview, pure_noise };

struct PriorProvider {
    PriorVariant variant = PriorVariant::oracle_perturbed;
    PerturbConfig perturb;                   // oracle_perturbed inconsistency
    const Scene* scene = nullptr;            // oracle source (views + cameras)
    const CycleModel* prior_model = nullptr; // learned_multiview generator
    int prior_steps = 30;

    struct Views {
        Tensor views01;  // [V,3,H,W] in [0,1] (empty for pure_noise)
        std::vector<CameraPose> cameras;
    };
    Views make(uint64_t seed, int resolution, const std::vector<int>& prompt) const;
};

enum class SampleMode { image_to_3d, text_to_3d };

struct SampleTrace {
    int step_index = 0;
    int t = 0;
    int t_prev = 0;
    const std::vector<double>* x_state = nullptr;  // model space, after ref pinning
    Tensor x0_hat01;                               // [V,3,H,W]
    Tensor x0_rerendered01;                        // [V,3,H,W]
};

struct SampleOptions {
    SampleMode mode = SampleMode::image_to_3d;
    int steps = 30;
    double cfg_scale = 3.0;
    bool ref_injection = true;
    uint64_t seed = 0;
    std::vector<int> prompt;                           // token ids
    std::map<int, std::vector<int>> per_view_prompts;  // view -> override tokens
    int invert_fixpoint_iters = 4;

    // Test hooks. reconstruct_override replaces the reconstruct+rerender
    // stage (input/output in [0,1] image space).
    std::function<Tensor(const Tensor& x0_views01, const std::vector<CameraPose>&, int t)>
        reconstruct_override;
    std::function<void(const SampleTrace&)> on_step;
};

struct SampleResult {
    GaussianCloud cloud;
    Tensor final_views01;  // [V,3,H,W]
    std::vector<CameraPose> cameras;
};

// input_image01: [3,H,W] in [0,1]; required in image_to_3d mode, ignored in
// text_to_3d mode. The x_t state is carried in double precision so the
// update rule can be checked against an independent sampler to 1e-9.
SampleResult sample(const CycleModel& model, const Tensor* input_image01,
                    const PriorProvider& prior, const SampleOptions& opts);

}  // namespace splatloop
