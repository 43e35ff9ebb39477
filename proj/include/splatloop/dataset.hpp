#pragma once

#include <string>
#include <vector>

#include "splatloop/camera.hpp"
#include "splatloop/gsplat.hpp"
#include "splatloop/rng.hpp"

namespace splatloop {

// Procedural multi-view dataset: every scene is itself a Gaussian cloud, so
// ground-truth views are renders of the same representation the model
// predicts and "perfect reconstruction" is well defined.

// Conditioning vocabulary. Id 0 is the reserved NULL (unconditional) token.
inline constexpr int kNullToken = 0;
inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 3;
inline constexpr int kVocabSize = 1 + kNumColors + kNumShapes;

int color_token(int color_class);          // 1..6
int shape_token(int shape_class);          // 7..9
const char* token_name(int token_id);
int token_id(const std::string& name);     // throws on unknown name
std::vector<int> parse_prompt(const std::string& comma_separated);

struct SceneSpec {
    uint64_t seed = 0;
    struct Primitive {
        int shape_class = 0;  // 0 blob, 1 ellipsoid shell, 2 ring
        int color_class = 0;
        Vec3 center = {0, 0, 0};
        double size = 0.2;
    };
    std::vector<Primitive> primitives;
    std::vector<int> caption() const;  // color/shape token per primitive
};

// Deterministic in seed; the cloud satisfies every GaussianCloud invariant
// and fits inside the unit sphere (position norm + 3 * max scale <= 1).
std::pair<SceneSpec, GaussianCloud> generate_scene(uint64_t seed);

struct ViewSet {
    std::vector<CameraPose> cameras;        // exactly 36, orbit radius 1.5
    std::vector<int> input_indices;         // 4, elevation within [-5, 5] deg
    std::vector<int> supervision_indices;   // 8, disjoint from the inputs
    Tensor images;                          // [36,3,H,W] in [0,1], white bg
    Tensor masks;                           // [36,H,W]

    Tensor view_image(int idx) const;       // [3,H,W] copy
    Tensor view_mask(int idx) const;        // [H,W] copy
    int resolution() const { return images.dim(2); }
};

ViewSet render_viewset(const GaussianCloud& cloud, uint64_t seed, int resolution);

struct PerturbConfig {
    double hue_sigma = 0.0;         // radians of rotation about the gray axis
    double warp_px = 0.0;           // smooth warp amplitude in pixels
    double noise_sigma = 0.0;       // iid pixel noise
    double brightness_sigma = 0.0;  // multiplicative brightness jitter
    bool exempt_reference = true;
    int reference_slot = 0;
    bool is_identity() const {
        return hue_sigma == 0 && warp_px == 0 && noise_sigma == 0 && brightness_sigma == 0;
    }
};

// Per-view independent photometric/geometric perturbation of [V,3,H,W]
// views; magnitude zero is the bitwise identity.
Tensor perturb_views(const Tensor& views, const PerturbConfig& cfg, uint64_t seed);

struct Scene {
    uint64_t seed = 0;
    SceneSpec spec;           // empty primitives when loaded from disk
    std::vector<int> caption; // conditioning token ids
    GaussianCloud cloud;
    ViewSet views;
};

Scene make_scene(uint64_t seed, int resolution);

// Scene directory: data.ftc with images/masks/cameras/cloud plus meta.kv.
void save_scene(const std::string& dir, const Scene& scene, bool png_export = false);
Scene load_scene(const std::string& dir);

}  // namespace splatloop
