#include "splatloop/kernels.hpp"

#include <atomic>
#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace splatloop::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

int conv_out_dim(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// Per-output-element accumulation order matches kernels::serial exactly, so
// the parallel results are bit-identical for any thread count.

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    int n, int ic, int h, int wdt, int oc, int kh, int kw,
                    int stride, int pad) {
    if (!parallel_enabled()) {
        serial::conv2d_forward(x, w, bias, y, n, ic, h, wdt, oc, kh, kw, stride, pad);
        return;
    }
    const int oh = conv_out_dim(h, kh, stride, pad);
    const int ow = conv_out_dim(wdt, kw, stride, pad);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ni = 0; ni < n; ++ni)
        for (int oci = 0; oci < oc; ++oci) {
            float* yp = y + ((static_cast<size_t>(ni) * oc + oci) * oh) * ow;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float acc = bias ? bias[oci] : 0.0f;
                    for (int ici = 0; ici < ic; ++ici) {
                        const float* xp =
                            x + ((static_cast<size_t>(ni) * ic + ici) * h) * wdt;
                        const float* wp =
                            w + ((static_cast<size_t>(oci) * ic + ici) * kh) * kw;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wdt) continue;
                                acc += xp[static_cast<size_t>(iy) * wdt + ix] *
                                       wp[static_cast<size_t>(ky) * kw + kx];
                            }
                        }
                    }
                    yp[static_cast<size_t>(oy) * ow + ox] = acc;
                }
        }
}

void conv2d_dgrad(const float* gy, const float* w, float* gx,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad) {
    if (!parallel_enabled()) {
        serial::conv2d_dgrad(gy, w, gx, n, ic, h, wdt, oc, kh, kw, stride, pad);
        return;
    }
    const int oh = conv_out_dim(h, kh, stride, pad);
    const int ow = conv_out_dim(wdt, kw, stride, pad);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ni = 0; ni < n; ++ni)
        for (int ici = 0; ici < ic; ++ici) {
            float* gxp = gx + ((static_cast<size_t>(ni) * ic + ici) * h) * wdt;
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wdt; ++ix) {
                    float acc = 0.0f;
                    for (int oci = 0; oci < oc; ++oci) {
                        const float* gyp =
                            gy + ((static_cast<size_t>(ni) * oc + oci) * oh) * ow;
                        const float* wp =
                            w + ((static_cast<size_t>(oci) * ic + ici) * kh) * kw;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int num_y = iy + pad - ky;
                            if (num_y < 0 || num_y % stride) continue;
                            const int oy = num_y / stride;
                            if (oy >= oh) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int num_x = ix + pad - kx;
                                if (num_x < 0 || num_x % stride) continue;
                                const int ox = num_x / stride;
                                if (ox >= ow) continue;
                                acc += gyp[static_cast<size_t>(oy) * ow + ox] *
                                       wp[static_cast<size_t>(ky) * kw + kx];
                            }
                        }
                    }
                    gxp[static_cast<size_t>(iy) * wdt + ix] += acc;
                }
        }
}

void conv2d_wgrad(const float* x, const float* gy, float* gw, float* gbias,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad) {
    if (!parallel_enabled()) {
        serial::conv2d_wgrad(x, gy, gw, gbias, n, ic, h, wdt, oc, kh, kw, stride, pad);
        return;
    }
    const int oh = conv_out_dim(h, kh, stride, pad);
    const int ow = conv_out_dim(wdt, kw, stride, pad);
#pragma omp parallel for schedule(static)
    for (int oci = 0; oci < oc; ++oci) {
        for (int ici = 0; ici < ic; ++ici)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    float acc = 0.0f;
                    for (int ni = 0; ni < n; ++ni) {
                        const float* gyp =
                            gy + ((static_cast<size_t>(ni) * oc + oci) * oh) * ow;
                        const float* xp =
                            x + ((static_cast<size_t>(ni) * ic + ici) * h) * wdt;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wdt) continue;
                                acc += gyp[static_cast<size_t>(oy) * ow + ox] *
                                       xp[static_cast<size_t>(iy) * wdt + ix];
                            }
                        }
                    }
                    gw[((static_cast<size_t>(oci) * ic + ici) * kh + ky) * kw + kx] += acc;
                }
        if (gbias) {
            float acc = 0.0f;
            for (int ni = 0; ni < n; ++ni) {
                const float* gyp = gy + ((static_cast<size_t>(ni) * oc + oci) * oh) * ow;
                for (int i = 0; i < oh * ow; ++i) acc += gyp[i];
            }
            gbias[oci] += acc;
        }
    }
}

void matmul(const float* a, const float* b, float* c,
            int n, int m, int k, bool trans_a, bool trans_b, bool accumulate) {
    if (!parallel_enabled()) {
        serial::matmul(a, b, c, n, m, k, trans_a, trans_b, accumulate);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            float acc = 0.0f;
            for (int p = 0; p < k; ++p) {
                const float av = trans_a ? a[static_cast<size_t>(p) * n + i]
                                         : a[static_cast<size_t>(i) * k + p];
                const float bv = trans_b ? b[static_cast<size_t>(j) * k + p]
                                         : b[static_cast<size_t>(p) * m + j];
                acc += av * bv;
            }
            float* cp = c + static_cast<size_t>(i) * m + j;
            *cp = accumulate ? *cp + acc : acc;
        }
}

}  // namespace splatloop::kernels
