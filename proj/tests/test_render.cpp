#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "splatloop/gsplat.hpp"
#include "splatloop/io.hpp"
#include "splatloop/kernels.hpp"
#include "splatloop/rng.hpp"

using namespace splatloop;

namespace {

GaussianCloud random_cloud(uint64_t seed, int n) {
    Rng rng(seed);
    GaussianCloud c = GaussianCloud::with_size(n);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            c.positions.at2(i, k) = static_cast<float>(rng.uniform(-0.45, 0.45));
            c.scales.at2(i, k) = static_cast<float>(rng.uniform(0.03, 0.25));
            c.colors.at2(i, k) = static_cast<float>(rng.uniform(0.1, 0.9));
        }
        for (int k = 0; k < 4; ++k)
            c.rotations.at2(i, k) = static_cast<float>(rng.normal());
        c.opacities.v[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(0.15, 0.85));
    }
    return c;
}

CameraPose test_camera(int res = 32) { return orbit_camera(0.3, 0.1, 1.5, res); }

}  // namespace

TEST_CASE("covariance_3d closed forms and properties") {
    Mat3 s1 = covariance_3d({1, 2, 3}, {1, 0, 0, 0});
    CHECK(s1[0][0] == doctest::Approx(1.0));
    CHECK(s1[1][1] == doctest::Approx(4.0));
    CHECK(s1[2][2] == doctest::Approx(9.0));
    CHECK(s1[0][1] == doctest::Approx(0.0));

    // 90 degrees about z swaps the x/y principal axes: diag(1,4,1)->diag(4,1,1).
    const double c45 = std::cos(M_PI / 4), s45 = std::sin(M_PI / 4);
    Mat3 s2 = covariance_3d({1, 2, 1}, {c45, 0, 0, s45});
    CHECK(s2[0][0] == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(s2[1][1] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s2[2][2] == doctest::Approx(1.0).epsilon(1e-9));

    Rng rng(2);
    for (int rep = 0; rep < 50; ++rep) {
        const Vec3 sc = {rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)};
        const std::array<double, 4> q = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        Mat3 cov = covariance_3d(sc, q);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(cov[i][j] == doctest::Approx(cov[j][i]));
        const Vec3 x = {rng.normal(), rng.normal(), rng.normal()};
        double quad = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) quad += x[i] * cov[i][j] * x[j];
        CHECK(quad >= -1e-12);
    }
    CHECK_THROWS(covariance_3d({1, 1, 1}, {0, 0, 0, 0}));
    CHECK_THROWS(covariance_3d({0, 1, 1}, {1, 0, 0, 0}));
}

TEST_CASE("project: on-axis closed form and culling") {
    const int res = 33;
    CameraPose cam = orbit_camera(0.0, 0.0, 1.5, res);
    // Eye at (1.5, 0, 0) looking at the origin: the origin projects to the
    // principal point at depth 1.5.
    GaussianCloud c = GaussianCloud::with_size(2);
    const double s = 0.1;
    for (int k = 0; k < 3; ++k) c.scales.at2(0, k) = static_cast<float>(s);
    c.opacities.v[0] = 0.5f;
    // Second gaussian behind the camera.
    c.positions.at2(1, 0) = 3.0f;
    c.opacities.v[1] = 0.5f;

    RenderSettings st;
    auto projected = project(c, cam, st);
    CHECK_FALSE(projected[0].culled);
    CHECK(projected[1].culled);
    CHECK(projected[0].mean[0] == doctest::Approx(cam.cx).epsilon(1e-9));
    CHECK(projected[0].mean[1] == doctest::Approx(cam.cy).epsilon(1e-9));
    CHECK(projected[0].depth == doctest::Approx(1.5).epsilon(1e-9));
    const double expect = std::pow(cam.focal * s / 1.5, 2) + st.lowpass;
    CHECK(projected[0].cov[0][0] == doctest::Approx(expect).epsilon(1e-6));
    CHECK(projected[0].cov[1][1] == doctest::Approx(expect).epsilon(1e-6));
    CHECK(projected[0].cov[0][1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("render: empty cloud gives background and zero mask") {
    CameraPose cam = test_camera(16);
    RenderOutput out = render(GaussianCloud::empty(), cam, {0.2, 0.4, 0.6});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            CHECK(out.image.v[(0 * 16 + static_cast<size_t>(y)) * 16 + x] == doctest::Approx(0.2f));
            CHECK(out.alpha_mask.v[static_cast<size_t>(y) * 16 + x] == 0.0f);
        }
}

TEST_CASE("render: single on-axis gaussian, unimodal mask") {
    const int res = 33;
    CameraPose cam = orbit_camera(0.0, 0.0, 1.5, res);
    GaussianCloud c = GaussianCloud::with_size(1);
    for (int k = 0; k < 3; ++k) c.scales.at2(0, k) = 0.08f;
    c.opacities.v[0] = 1.0f;
    c.colors.at2(0, 0) = 1.0f;
    RenderOutput out = render(c, cam, {0, 0, 0});
    const int mid = res / 2;
    const float peak = out.alpha_mask.v[static_cast<size_t>(mid) * res + mid];
    float prev = peak;
    for (int x = mid; x < res; ++x) {
        const float v = out.alpha_mask.v[static_cast<size_t>(mid) * res + x];
        CHECK(v <= prev + 1e-7f);
        CHECK(v <= peak);
        prev = v;
    }
    CHECK(peak > 0.9f);
}

TEST_CASE("render: two-gaussian compositing by hand") {
    // Both on the optical axis, alpha exactly 0.5 at the central pixel,
    // black background: pixel = 0.5*c1 + 0.25*c2, mask = 0.75.
    const int res = 17;
    CameraPose cam = orbit_camera(0.0, 0.0, 1.5, res);
    GaussianCloud c = GaussianCloud::with_size(2);
    // Nearer gaussian along the view axis (camera sits at x=+1.5).
    c.positions.at2(0, 0) = 0.4f;
    c.positions.at2(1, 0) = -0.4f;
    for (int i = 0; i < 2; ++i) {
        for (int k = 0; k < 3; ++k) c.scales.at2(i, k) = 0.1f;
        c.opacities.v[static_cast<size_t>(i)] = 0.5f;
    }
    c.colors.at2(0, 0) = 1.0f;  // near red
    c.colors.at2(1, 2) = 1.0f;  // far blue
    RenderOutput out = render(c, cam, {0, 0, 0});
    const int mid = res / 2;
    const size_t px = static_cast<size_t>(mid) * res + mid;
    CHECK(out.image.v[(0 * static_cast<size_t>(res) + mid) * res + mid] ==
          doctest::Approx(0.5).epsilon(1e-6));
    CHECK(out.image.v[(2 * static_cast<size_t>(res) + mid) * res + mid] ==
          doctest::Approx(0.25).epsilon(1e-6));
    CHECK(out.alpha_mask.v[px] == doctest::Approx(0.75).epsilon(1e-6));
    // Depth diagnostic: weighted mean of 1.1 and 1.9 with weights 2:1.
    CHECK(out.depth.v[px] == doctest::Approx((0.5 * 1.1 + 0.25 * 1.9) / 0.75).epsilon(1e-5));
}

TEST_CASE("render: storage order does not matter") {
    CameraPose cam = test_camera();
    GaussianCloud a = random_cloud(33, 24);
    // Reversed storage order.
    GaussianCloud b = GaussianCloud::with_size(24);
    for (int i = 0; i < 24; ++i) {
        const int j = 23 - i;
        for (int k = 0; k < 3; ++k) {
            b.positions.at2(i, k) = a.positions.at2(j, k);
            b.scales.at2(i, k) = a.scales.at2(j, k);
            b.colors.at2(i, k) = a.colors.at2(j, k);
        }
        for (int k = 0; k < 4; ++k) b.rotations.at2(i, k) = a.rotations.at2(j, k);
        b.opacities.v[static_cast<size_t>(i)] = a.opacities.v[static_cast<size_t>(j)];
    }
    RenderOutput ra = render(a, cam, {1, 1, 1});
    RenderOutput rb = render(b, cam, {1, 1, 1});
    for (int64_t i = 0; i < ra.image.numel(); ++i)
        CHECK(std::abs(ra.image.v[static_cast<size_t>(i)] - rb.image.v[static_cast<size_t>(i)]) <=
              1e-6f);
}

TEST_CASE("render: occlusion removes the far color") {
    const int res = 33;
    CameraPose cam = orbit_camera(0.0, 0.0, 1.5, res);
    GaussianCloud c = GaussianCloud::with_size(2);
    c.positions.at2(0, 0) = 0.5f;   // near, fully opaque, large
    c.positions.at2(1, 0) = -0.5f;  // far
    for (int k = 0; k < 3; ++k) {
        c.scales.at2(0, k) = 6.0f;  // covers the probed pixels with alpha at the clamp
        c.scales.at2(1, k) = 0.2f;
    }
    c.opacities.v[0] = 1.0f;
    c.opacities.v[1] = 1.0f;
    c.colors.at2(0, 0) = 1.0f;  // near red
    c.colors.at2(1, 2) = 1.0f;  // far blue
    RenderOutput out = render(c, cam, {0, 0, 0});
    const int mid = res / 2;
    for (int dyx = -2; dyx <= 2; ++dyx) {
        const float blue =
            out.image.v[(2 * static_cast<size_t>(res) + mid) * res + (mid + dyx)];
        CHECK(blue <= 1e-3f);
    }
}

TEST_CASE("render: mask stays in [0,1] on random clouds") {
    CameraPose cam = test_camera();
    for (uint64_t seed = 0; seed < 8; ++seed) {
        RenderOutput out = render(random_cloud(seed, 40), cam, {1, 1, 1});
        for (float m : out.alpha_mask.v) {
            CHECK(m >= 0.0f);
            CHECK(m <= 1.0f);
        }
        for (float v : out.image.v) CHECK(std::isfinite(v));
    }
}

TEST_CASE("render: gauge invariance under a joint rigid transform") {
    CameraPose cam = test_camera();
    GaussianCloud cloud = random_cloud(7, 16);
    RenderOutput base = render(cloud, cam, {1, 1, 1});

    // Rotate the world about z by 0.7 rad and translate; move the camera along.
    const double th = 0.7;
    const Mat3 rg = {{{std::cos(th), -std::sin(th), 0}, {std::sin(th), std::cos(th), 0},
                      {0, 0, 1}}};
    const Vec3 tg = {0.2, -0.3, 0.15};
    GaussianCloud moved = cloud;
    for (int i = 0; i < cloud.size(); ++i) {
        Vec3 p = {cloud.positions.at2(i, 0), cloud.positions.at2(i, 1),
                  cloud.positions.at2(i, 2)};
        for (int r = 0; r < 3; ++r)
            moved.positions.at2(i, r) = static_cast<float>(
                rg[r][0] * p[0] + rg[r][1] * p[1] + rg[r][2] * p[2] + tg[r]);
        // Quaternion of the rotation about z composed with the original one.
        const double gw = std::cos(th / 2), gz = std::sin(th / 2);
        const double q[4] = {cloud.rotations.at2(i, 0), cloud.rotations.at2(i, 1),
                             cloud.rotations.at2(i, 2), cloud.rotations.at2(i, 3)};
        moved.rotations.at2(i, 0) = static_cast<float>(gw * q[0] - gz * q[3]);
        moved.rotations.at2(i, 1) = static_cast<float>(gw * q[1] - gz * q[2]);
        moved.rotations.at2(i, 2) = static_cast<float>(gw * q[2] + gz * q[1]);
        moved.rotations.at2(i, 3) = static_cast<float>(gw * q[3] + gz * q[0]);
    }
    CameraPose cam2 = cam;
    // W' = W * G^{-1}: rot' = R_w Rg^T, trans' = t_w - rot' tg.
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += cam.rot[r][k] * rg[c][k];
            cam2.rot[r][c] = s;
        }
    for (int r = 0; r < 3; ++r) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += cam2.rot[r][k] * tg[k];
        cam2.trans[r] = cam.trans[r] - s;
    }
    RenderOutput moved_out = render(moved, cam2, {1, 1, 1});
    for (int64_t i = 0; i < base.image.numel(); ++i)
        CHECK(std::abs(base.image.v[static_cast<size_t>(i)] -
                       moved_out.image.v[static_cast<size_t>(i)]) <= 1e-5f);
}

TEST_CASE("render: OpenMP path matches the serial reference bit for bit") {
    CameraPose cam = test_camera();
    GaussianCloud cloud = random_cloud(91, 48);
    kernels::set_parallel(true);
    RenderOutput par = render(cloud, cam, {1, 1, 1});
    RenderOutput ser = render_reference(cloud, cam, {1, 1, 1});
    CHECK(par.image.v == ser.image.v);
    CHECK(par.alpha_mask.v == ser.alpha_mask.v);
    CHECK(par.depth.v == ser.depth.v);
}

TEST_CASE("render_gradcheck: analytic gradients match finite differences") {
    for (uint64_t seed = 100; seed < 103; ++seed) {
        CameraPose cam = test_camera();
        GaussianCloud cloud = random_cloud(seed, 6);
        L2RenderLoss loss;
        RenderOutputD target = render_f64(random_cloud(seed + 50, 6), cam, {1, 1, 1});
        loss.target_image = target.image;
        loss.target_mask = target.mask;
        const double err = render_gradcheck(cloud, cam, {1, 1, 1}, loss);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("render_gradcheck: constant loss has zero gradients") {
    struct ConstLoss : RenderLoss {
        double eval(const RenderOutputD&) const override { return 3.5; }
        void grad(const RenderOutputD& out, std::vector<double>& gi,
                  std::vector<double>& gm) const override {
            gi.assign(out.image.size(), 0.0);
            gm.assign(out.mask.size(), 0.0);
        }
    };
    CameraPose cam = test_camera(16);
    GaussianCloud cloud = random_cloud(4, 4);
    ConstLoss loss;
    CHECK(render_gradcheck(cloud, cam, {1, 1, 1}, loss) == 0.0);
}

TEST_CASE("cloud persistence: FTC round trip and PLY layout") {
    GaussianCloud cloud = random_cloud(17, 9);
    const std::string dir = "render_io_tmp";
    ensure_dir(dir);
    save_cloud_ftc(dir + "/cloud.ftc", cloud);
    GaussianCloud back = load_cloud_ftc(dir + "/cloud.ftc");
    CHECK(back.positions.v == cloud.positions.v);
    CHECK(back.opacities.v == cloud.opacities.v);

    export_ply(dir + "/cloud.ply", cloud);
    const std::string ply = read_text_file(dir + "/cloud.ply");
    CHECK(ply.find("format binary_little_endian 1.0") != std::string::npos);
    CHECK(ply.find("element vertex 9") != std::string::npos);
    CHECK(ply.find("property float f_dc_0") != std::string::npos);
    const size_t header_end = ply.find("end_header\n");
    REQUIRE(header_end != std::string::npos);
    const size_t body = ply.size() - (header_end + 11);
    CHECK(body == 9u * 17u * 4u);

    export_ply(dir + "/cloud2.ply", cloud);
    CHECK(read_text_file(dir + "/cloud2.ply") == ply);
}
