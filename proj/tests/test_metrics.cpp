#include <doctest.h>

#include <cmath>

#include "splatloop/dataset.hpp"
#include "splatloop/io.hpp"
#include "splatloop/metrics.hpp"
#include "splatloop/rng.hpp"

using namespace splatloop;

TEST_CASE("psnr examples") {
    Tensor a({3, 8, 8});
    Rng rng(1);
    rng.fill_uniform(a, 0.0, 1.0);
    CHECK(psnr(a, a) == kPsnrCap);

    // Uniform offset of 0.1 gives MSE 0.01 -> 20 dB.
    Tensor mid = Tensor::full({3, 8, 8}, 0.45f);
    Tensor off = Tensor::full({3, 8, 8}, 0.55f);
    CHECK(psnr(mid, off) == doctest::Approx(20.0).epsilon(1e-5));

    // Binary inversion: max error -> 0 dB.
    Tensor zero({4, 4}), one = Tensor::full({4, 4}, 1.0f);
    CHECK(psnr(zero, one) == doctest::Approx(0.0).epsilon(1e-9));

    Tensor wrong({2, 2});
    CHECK_THROWS(psnr(a, wrong));
}

TEST_CASE("ssim examples") {
    Tensor a({3, 16, 16});
    Rng rng(2);
    rng.fill_uniform(a, 0.0, 1.0);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));

    // Constants 0 vs 1: closed form with the stabilizers.
    Tensor zeros({16, 16}), ones = Tensor::full({16, 16}, 1.0f);
    const double c1 = 1e-4, c2 = 9e-4;
    const double expect = (c1 * c2) / ((1.0 + c1) * c2);
    CHECK(ssim(zeros, ones) == doctest::Approx(expect).epsilon(1e-9));

    Tensor b({3, 16, 16});
    rng.fill_uniform(b, 0.0, 1.0);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

    Tensor tiny({8, 8});
    CHECK_THROWS(ssim(tiny, tiny));
}

TEST_CASE("perceptual distance: deterministic, zero on identical, positive otherwise") {
    Tensor a({1, 3, 16, 16}), b({1, 3, 16, 16});
    Rng rng(3);
    rng.fill_uniform(a, 0.0, 1.0);
    rng.fill_uniform(b, 0.0, 1.0);
    PerceptualNet net1, net2;
    CHECK(net1.distance(a, a) == 0.0);
    const double d1 = net1.distance(a, b);
    CHECK(d1 > 0.0);
    CHECK(net2.distance(a, b) == d1);  // fixed seed, independent instances agree
    CHECK(shared_perceptual_net().distance(a, b) == d1);
}

TEST_CASE("consistency_error: floor on ground-truth renders, raised by perturbation") {
    Scene scene = make_scene(7, 24);
    Tensor views({4, 3, 24, 24});
    std::vector<CameraPose> cams;
    for (int i = 0; i < 4; ++i) {
        const int idx = scene.views.input_indices[static_cast<size_t>(i)];
        Tensor img = scene.views.view_image(idx);
        std::copy_n(img.v.begin(), img.numel(), views.v.begin() + i * img.numel());
        cams.push_back(scene.views.cameras[static_cast<size_t>(idx)]);
    }
    auto floor1 = consistency_error(views, cams, scene.cloud);
    REQUIRE(floor1.has_value());
    CHECK(*floor1 >= 0.0);
    CHECK(*floor1 < 0.06);  // interpolation error only on renders of one cloud

    // The floor is reproducible: a rebuilt scene gives the same value.
    Scene again = make_scene(7, 24);
    auto floor2 = consistency_error(views, cams, again.cloud);
    REQUIRE(floor2.has_value());
    CHECK(*floor2 == doctest::Approx(*floor1).epsilon(1e-12));

    PerturbConfig cfg;
    cfg.hue_sigma = 0.2;
    cfg.exempt_reference = false;
    auto raised = consistency_error(perturb_views(views, cfg, 99), cams, scene.cloud);
    REQUIRE(raised.has_value());
    CHECK(*raised > *floor1);

    // Single view: no pairs, metric absent.
    Tensor one({1, 3, 24, 24});
    std::copy_n(views.v.begin(), one.numel(), one.v.begin());
    CHECK_FALSE(consistency_error(one, {cams[0]}, scene.cloud).has_value());
}

TEST_CASE("consistency_error: storage order of views does not matter") {
    Scene scene = make_scene(13, 16);
    Tensor views({4, 3, 16, 16});
    std::vector<CameraPose> cams;
    for (int i = 0; i < 4; ++i) {
        const int idx = scene.views.input_indices[static_cast<size_t>(i)];
        Tensor img = scene.views.view_image(idx);
        std::copy_n(img.v.begin(), img.numel(), views.v.begin() + i * img.numel());
        cams.push_back(scene.views.cameras[static_cast<size_t>(idx)]);
    }
    PerturbConfig cfg;
    cfg.hue_sigma = 0.15;
    cfg.exempt_reference = false;
    views = perturb_views(views, cfg, 5);
    auto base = consistency_error(views, cams, scene.cloud);

    Tensor rev(views.shape);
    std::vector<CameraPose> rev_cams;
    const int64_t pv = views.numel() / 4;
    for (int i = 0; i < 4; ++i) {
        std::copy_n(views.v.begin() + (3 - i) * pv, pv, rev.v.begin() + i * pv);
        rev_cams.push_back(cams[static_cast<size_t>(3 - i)]);
    }
    auto reversed = consistency_error(rev, rev_cams, scene.cloud);
    REQUIRE(base.has_value());
    REQUIRE(reversed.has_value());
    CHECK(*base == doctest::Approx(*reversed).epsilon(1e-9));
}

TEST_CASE("EvalReport serialization") {
    EvalReport r;
    r.per_view_psnr = {20.0, 22.0};
    r.per_view_ssim = {0.8, 0.9};
    r.per_view_perceptual = {0.1, 0.2};
    r.consistency = 0.015;
    r.seed = 9;
    r.finalize();
    CHECK(r.mean_psnr == doctest::Approx(21.0));
    ensure_dir("metrics_tmp");
    r.write("metrics_tmp/report.kv", "metrics_tmp/report.csv");
    KvConfig kv = KvConfig::parse_file("metrics_tmp/report.kv");
    CHECK(kv.get_num("mean_psnr", 0) == doctest::Approx(21.0));
    CHECK(kv.get_num("consistency_error", 0) == doctest::Approx(0.015));
    const std::string csv = read_text_file("metrics_tmp/report.csv");
    CHECK(csv.find("view,psnr,ssim,perceptual") == 0);
}
