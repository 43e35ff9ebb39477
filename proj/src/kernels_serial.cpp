#include <cstddef>

#include "splatloop/kernels.hpp"

// Plain reference implementations. Kept deliberately naive so they can serve
// as oracles for the OpenMP versions; the benchmark tool reports the speedup.

namespace splatloop::kernels::serial {

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    int n, int ic, int h, int wdt, int oc, int kh, int kw,
                    int stride, int pad) {
    const int oh = conv_out_dim(h, kh, stride, pad);
    const int ow = conv_out_dim(wdt, kw, stride, pad);
    for (int ni = 0; ni < n; ++ni)
        for (int oci = 0; oci < oc; ++oci)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float acc = bias ? bias[oci] : 0.0f;
                    for (int ici = 0; ici < ic; ++ici)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * stride + ky - pad;
                                const int ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wdt) continue;
                                acc += x[((static_cast<size_t>(ni) * ic + ici) * h + iy) * wdt + ix] *
                                       w[((static_cast<size_t>(oci) * ic + ici) * kh + ky) * kw + kx];
                            }
                    y[((static_cast<size_t>(ni) * oc + oci) * oh + oy) * ow + ox] = acc;
                }
}

void conv2d_dgrad(const float* gy, const float* w, float* gx,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad) {
    const int oh = conv_out_dim(h, kh, stride, pad);
    const int ow = conv_out_dim(wdt, kw, stride, pad);
    for (int ni = 0; ni < n; ++ni)
        for (int ici = 0; ici < ic; ++ici)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wdt; ++ix) {
                    float acc = 0.0f;
                    for (int oci = 0; oci < oc; ++oci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int num_y = iy + pad - ky;
                                const int num_x = ix + pad - kx;
                                if (num_y < 0 || num_x < 0 || num_y % stride || num_x % stride)
                                    continue;
                                const int oy = num_y / stride;
                                const int ox = num_x / stride;
                                if (oy >= oh || ox >= ow) continue;
                                acc += gy[((static_cast<size_t>(ni) * oc + oci) * oh + oy) * ow + ox] *
                                       w[((static_cast<size_t>(oci) * ic + ici) * kh + ky) * kw + kx];
                            }
                    gx[((static_cast<size_t>(ni) * ic + ici) * h + iy) * wdt + ix] += acc;
                }
}

void conv2d_wgrad(const float* x, const float* gy, float* gw, float* gbias,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad) {
    const int oh = conv_out_dim(h, kh, stride, pad);
    const int ow = conv_out_dim(wdt, kw, stride, pad);
    for (int oci = 0; oci < oc; ++oci) {
        for (int ici = 0; ici < ic; ++ici)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    float acc = 0.0f;
                    for (int ni = 0; ni < n; ++ni)
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wdt) continue;
                                acc += gy[((static_cast<size_t>(ni) * oc + oci) * oh + oy) * ow + ox] *
                                       x[((static_cast<size_t>(ni) * ic + ici) * h + iy) * wdt + ix];
                            }
                        }
                    gw[((static_cast<size_t>(oci) * ic + ici) * kh + ky) * kw + kx] += acc;
                }
        if (gbias) {
            float acc = 0.0f;
            for (int ni = 0; ni < n; ++ni)
                for (int i = 0; i < oh * ow; ++i)
                    acc += gy[((static_cast<size_t>(ni) * oc + oci) * oh) * ow + i];
            gbias[oci] += acc;
        }
    }
}

void matmul(const float* a, const float* b, float* c,
            int n, int m, int k, bool trans_a, bool trans_b, bool accumulate) {
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

}  // namespace splatloop::kernels::serial
