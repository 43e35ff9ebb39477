#pragma once

#include <cstdint>

namespace splatloop::kernels {

// Hot inner loops live here. Every kernel has an OpenMP-parallel version
// (the default) and a plain serial reference in kernels::serial used by the
// tests and the benchmark tool. Both orders of accumulation are identical,
// so outputs are bit-exact equal regardless of thread count.

void set_parallel(bool enabled);
bool parallel_enabled();
void set_num_threads(int n);  // 0 = library default
int max_threads();

// y[n,oc,oh,ow] = bias[oc] + sum_{ic,ky,kx} x[n,ic,oh*s+ky-p,ow*s+kx-p] * w[oc,ic,ky,kx]
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    int n, int ic, int h, int wdt, int oc, int kh, int kw,
                    int stride, int pad);

// gx += dconv/dx^T gy (gx must be zero-initialized or hold prior gradient)
void conv2d_dgrad(const float* gy, const float* w, float* gx,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad);

// gw += x (*) gy ; gbias += sum gy (both accumulate)
void conv2d_wgrad(const float* x, const float* gy, float* gw, float* gbias,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad);

// c = op(a) * op(b), c is [n,m]; a is [n,k] (or [k,n] when trans_a),
// b is [k,m] (or [m,k] when trans_b). accumulate adds into c.
void matmul(const float* a, const float* b, float* c,
            int n, int m, int k, bool trans_a, bool trans_b, bool accumulate);

int conv_out_dim(int in, int kernel, int stride, int pad);

namespace serial {
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    int n, int ic, int h, int wdt, int oc, int kh, int kw,
                    int stride, int pad);
void conv2d_dgrad(const float* gy, const float* w, float* gx,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad);
void conv2d_wgrad(const float* x, const float* gy, float* gw, float* gbias,
                  int n, int ic, int h, int wdt, int oc, int kh, int kw,
                  int stride, int pad);
void matmul(const float* a, const float* b, float* c,
            int n, int m, int k, bool trans_a, bool trans_b, bool accumulate);
}  // namespace serial

}  // namespace splatloop::kernels
