// Benchmark comparing the serial reference kernels against the OpenMP
// versions: conv2d forward/backward, matmul, and the splat renderer.

#include <chrono>
#include <cstdio>
#include <functional>

#include "splatloop/gsplat.hpp"
#include "splatloop/kernels.hpp"
#include "splatloop/rng.hpp"

using namespace splatloop;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto end = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(end - start).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-24s serial %9.3f ms   openmp %9.3f ms   speedup %.2fx\n", name, serial_ms,
                parallel_ms, serial_ms / parallel_ms);
}

GaussianCloud random_cloud(int n) {
    Rng rng(7);
    GaussianCloud c = GaussianCloud::with_size(n);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            c.positions.at2(i, k) = static_cast<float>(rng.uniform(-0.5, 0.5));
            c.scales.at2(i, k) = static_cast<float>(rng.uniform(0.02, 0.15));
            c.colors.at2(i, k) = static_cast<float>(rng.uniform(0.1, 0.9));
        }
        for (int k = 0; k < 4; ++k) c.rotations.at2(i, k) = static_cast<float>(rng.normal());
        c.opacities.v[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(0.2, 0.9));
    }
    return c;
}

}  // namespace

int main() {
    std::printf("threads available: %d\n\n", kernels::max_threads());
    Rng rng(3);

    {  // conv2d, training-sized
        const int n = 4, ic = 32, h = 32, w = 32, oc = 32, k = 3;
        Tensor x({n, ic, h, w}), wt({oc, ic, k, k}), b({oc}), y({n, oc, h, w});
        Tensor gy({n, oc, h, w}), gx({n, ic, h, w}), gw({oc, ic, k, k}), gb({oc});
        rng.fill_normal(x);
        rng.fill_normal(wt, 0.05);
        rng.fill_normal(gy);
        report("conv2d 3x3 forward",
               time_ms([&] { kernels::serial::conv2d_forward(x.data(), wt.data(), b.data(),
                                                             y.data(), n, ic, h, w, oc, k, k, 1,
                                                             1); },
                       3),
               time_ms([&] { kernels::conv2d_forward(x.data(), wt.data(), b.data(), y.data(),
                                                     n, ic, h, w, oc, k, k, 1, 1); },
                       3));
        report("conv2d 3x3 dgrad",
               time_ms([&] { kernels::serial::conv2d_dgrad(gy.data(), wt.data(), gx.data(), n,
                                                           ic, h, w, oc, k, k, 1, 1); },
                       3),
               time_ms([&] { kernels::conv2d_dgrad(gy.data(), wt.data(), gx.data(), n, ic, h,
                                                   w, oc, k, k, 1, 1); },
                       3));
        report("conv2d 3x3 wgrad",
               time_ms([&] { kernels::serial::conv2d_wgrad(x.data(), gy.data(), gw.data(),
                                                           gb.data(), n, ic, h, w, oc, k, k, 1,
                                                           1); },
                       3),
               time_ms([&] { kernels::conv2d_wgrad(x.data(), gy.data(), gw.data(), gb.data(),
                                                   n, ic, h, w, oc, k, k, 1, 1); },
                       3));
    }

    {  // matmul, attention-sized
        const int n = 256, k = 256, m = 256;
        Tensor a({n, k}), b({k, m}), c({n, m});
        rng.fill_normal(a);
        rng.fill_normal(b);
        report("matmul 256^3",
               time_ms([&] { kernels::serial::matmul(a.data(), b.data(), c.data(), n, m, k,
                                                     false, false, false); },
                       5),
               time_ms([&] { kernels::matmul(a.data(), b.data(), c.data(), n, m, k, false,
                                             false, false); },
                       5));
    }

    {  // splat renderer
        GaussianCloud cloud = random_cloud(2048);
        CameraPose cam = orbit_camera(0.4, 0.1, 1.5, 64);
        report("render 2048 @ 64^2",
               time_ms([&] { render_reference(cloud, cam, {1, 1, 1}); }, 3),
               time_ms([&] { render(cloud, cam, {1, 1, 1}); }, 3));

        Tensor gi({3, 64, 64}), gm({64, 64});
        Rng grng(5);
        grng.fill_normal(gi);
        grng.fill_normal(gm);
        CloudGrads grads = CloudGrads::zeros_like(cloud);
        kernels::set_parallel(false);
        const double serial_ms = time_ms(
            [&] { render_backward(cloud, cam, {1, 1, 1}, {}, gi, gm, grads); }, 3);
        kernels::set_parallel(true);
        const double parallel_ms = time_ms(
            [&] { render_backward(cloud, cam, {1, 1, 1}, {}, gi, gm, grads); }, 3);
        report("render backward", serial_ms, parallel_ms);
    }
    return 0;
}
