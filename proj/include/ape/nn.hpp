#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#if defined(__SSE2__)
#include <emmintrin.h>
#endif

#include "ape/resample.hpp"
#include "ape/rng.hpp"
#include "ape/tensor.hpp"

namespace ape {

/// Convolution parameters. Weight layout (c_out, c_in, kx, ky, kz).
template <typename T>
struct ConvParam {
    int c_out = 0, c_in = 0, k = 1;
    std::vector<T> w;
    std::vector<T> b;

    ConvParam() = default;
    ConvParam(int co, int ci, int kk)
        : c_out(co), c_in(ci), k(kk),
          w(std::size_t(co) * ci * kk * kk * kk, T(0)), b(std::size_t(co), T(0)) {}

    std::size_t widx(int co, int ci_, int kx, int ky, int kz) const {
        return (((std::size_t(co) * c_in + ci_) * k + kx) * k + ky) * k + kz;
    }

    /// He-style init; std covers the GELU gain well enough at these depths.
    void init(Rng& rng) {
        const double fan_in = double(c_in) * k * k * k;
        const double std = std::sqrt(2.0 / fan_in);
        for (auto& x : w) x = T(rng.normal(0.0, std));
        for (auto& x : b) x = T(0);
    }
};

namespace nn {

inline int conv_out_dim(int n, int k, int stride, int pad) {
    return (n + 2 * pad - k) / stride + 1;
}

namespace detail {

/// Row-major C(M,N) = A(M,K) * B(K,N), overwriting C. Plain blocked scalar
/// code; the float overload below carries the hot path.
template <typename T>
void gemm(int M, int N, int K, const T* a, const T* b, T* c) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) c[std::size_t(i) * N + j] = T(0);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            const T av = a[std::size_t(i) * K + k];
            if (av == T(0)) continue;
            const T* brow = b + std::size_t(k) * N;
            T* crow = c + std::size_t(i) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
}

#if defined(__SSE2__)
/// 4x8 register-blocked microkernel. Baseline SSE2 on purpose: wider vector
/// extensions are not trusted on every host this runs on.
inline void gemm(int M, int N, int K, const float* a, const float* b, float* c) {
    const int m4 = M & ~3;
    const int n8 = N & ~7;
    for (int j0 = 0; j0 < n8; j0 += 8) {
        for (int i0 = 0; i0 < m4; i0 += 4) {
            __m128 c00 = _mm_setzero_ps(), c01 = _mm_setzero_ps();
            __m128 c10 = _mm_setzero_ps(), c11 = _mm_setzero_ps();
            __m128 c20 = _mm_setzero_ps(), c21 = _mm_setzero_ps();
            __m128 c30 = _mm_setzero_ps(), c31 = _mm_setzero_ps();
            const float* a0 = a + std::size_t(i0) * K;
            const float* a1 = a0 + K;
            const float* a2 = a1 + K;
            const float* a3 = a2 + K;
            const float* bp = b + j0;
            for (int k = 0; k < K; ++k, bp += N) {
                const __m128 b0 = _mm_loadu_ps(bp);
                const __m128 b1 = _mm_loadu_ps(bp + 4);
                __m128 av = _mm_set1_ps(a0[k]);
                c00 = _mm_add_ps(c00, _mm_mul_ps(av, b0));
                c01 = _mm_add_ps(c01, _mm_mul_ps(av, b1));
                av = _mm_set1_ps(a1[k]);
                c10 = _mm_add_ps(c10, _mm_mul_ps(av, b0));
                c11 = _mm_add_ps(c11, _mm_mul_ps(av, b1));
                av = _mm_set1_ps(a2[k]);
                c20 = _mm_add_ps(c20, _mm_mul_ps(av, b0));
                c21 = _mm_add_ps(c21, _mm_mul_ps(av, b1));
                av = _mm_set1_ps(a3[k]);
                c30 = _mm_add_ps(c30, _mm_mul_ps(av, b0));
                c31 = _mm_add_ps(c31, _mm_mul_ps(av, b1));
            }
            float* c0 = c + std::size_t(i0) * N + j0;
            _mm_storeu_ps(c0, c00);
            _mm_storeu_ps(c0 + 4, c01);
            _mm_storeu_ps(c0 + N, c10);
            _mm_storeu_ps(c0 + N + 4, c11);
            _mm_storeu_ps(c0 + 2 * N, c20);
            _mm_storeu_ps(c0 + 2 * N + 4, c21);
            _mm_storeu_ps(c0 + 3 * N, c30);
            _mm_storeu_ps(c0 + 3 * N + 4, c31);
        }
        for (int i = m4; i < M; ++i) {
            __m128 acc0 = _mm_setzero_ps(), acc1 = _mm_setzero_ps();
            const float* arow = a + std::size_t(i) * K;
            const float* bp = b + j0;
            for (int k = 0; k < K; ++k, bp += N) {
                const __m128 av = _mm_set1_ps(arow[k]);
                acc0 = _mm_add_ps(acc0, _mm_mul_ps(av, _mm_loadu_ps(bp)));
                acc1 = _mm_add_ps(acc1, _mm_mul_ps(av, _mm_loadu_ps(bp + 4)));
            }
            float* crow = c + std::size_t(i) * N + j0;
            _mm_storeu_ps(crow, acc0);
            _mm_storeu_ps(crow + 4, acc1);
        }
    }
    if (n8 < N) {
        for (int i = 0; i < M; ++i) {
            const float* arow = a + std::size_t(i) * K;
            float* crow = c + std::size_t(i) * N;
            for (int j = n8; j < N; ++j) crow[j] = 0.f;
            for (int k = 0; k < K; ++k) {
                const float av = arow[k];
                const float* brow = b + std::size_t(k) * N;
                for (int j = n8; j < N; ++j) crow[j] += av * brow[j];
            }
        }
    }
}
#endif

/// Row-major C(M,N) = A(M,K) * B(N,K)^T. Both operands are read along
/// contiguous rows, so no transpose is materialized.
template <typename T>
void gemm_nt(int M, int N, int K, const T* a, const T* b, T* c) {
    for (int i = 0; i < M; ++i) {
        const T* arow = a + std::size_t(i) * K;
        T* crow = c + std::size_t(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* brow = b + std::size_t(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] = acc;
        }
    }
}

#if defined(__SSE2__)
inline float hsum(__m128 v) {
    __m128 s = _mm_add_ps(v, _mm_movehl_ps(v, v));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    return _mm_cvtss_f32(s);
}

inline void gemm_nt(int M, int N, int K, const float* a, const float* b, float* c) {
    const int m2 = M & ~1;
    const int n2 = N & ~1;
    const int k4 = K & ~3;
    for (int i0 = 0; i0 < m2; i0 += 2) {
        const float* a0 = a + std::size_t(i0) * K;
        const float* a1 = a0 + K;
        for (int j0 = 0; j0 < n2; j0 += 2) {
            const float* b0 = b + std::size_t(j0) * K;
            const float* b1 = b0 + K;
            __m128 s00 = _mm_setzero_ps(), s01 = _mm_setzero_ps();
            __m128 s10 = _mm_setzero_ps(), s11 = _mm_setzero_ps();
            for (int k = 0; k < k4; k += 4) {
                const __m128 va0 = _mm_loadu_ps(a0 + k);
                const __m128 va1 = _mm_loadu_ps(a1 + k);
                const __m128 vb0 = _mm_loadu_ps(b0 + k);
                const __m128 vb1 = _mm_loadu_ps(b1 + k);
                s00 = _mm_add_ps(s00, _mm_mul_ps(va0, vb0));
                s01 = _mm_add_ps(s01, _mm_mul_ps(va0, vb1));
                s10 = _mm_add_ps(s10, _mm_mul_ps(va1, vb0));
                s11 = _mm_add_ps(s11, _mm_mul_ps(va1, vb1));
            }
            float d00 = hsum(s00), d01 = hsum(s01), d10 = hsum(s10), d11 = hsum(s11);
            for (int k = k4; k < K; ++k) {
                d00 += a0[k] * b0[k];
                d01 += a0[k] * b1[k];
                d10 += a1[k] * b0[k];
                d11 += a1[k] * b1[k];
            }
            c[std::size_t(i0) * N + j0] = d00;
            c[std::size_t(i0) * N + j0 + 1] = d01;
            c[std::size_t(i0 + 1) * N + j0] = d10;
            c[std::size_t(i0 + 1) * N + j0 + 1] = d11;
        }
    }
    // remainder rows/columns fall back to single dots
    for (int i = 0; i < M; ++i) {
        const float* arow = a + std::size_t(i) * K;
        const int jstart = (i < m2) ? n2 : 0;
        for (int j = jstart; j < N; ++j) {
            const float* brow = b + std::size_t(j) * K;
            __m128 s = _mm_setzero_ps();
            for (int k = 0; k < k4; k += 4)
                s = _mm_add_ps(s, _mm_mul_ps(_mm_loadu_ps(arow + k), _mm_loadu_ps(brow + k)));
            float acc = hsum(s);
            for (int k = k4; k < K; ++k) acc += arow[k] * brow[k];
            c[std::size_t(i) * N + j] = acc;
        }
    }
}
#endif

/// Unrolls x into a (c_in*k^3, oh*ow*od) column matrix for a stride-1
/// convolution with symmetric zero padding.
template <typename T>
void im2col_s1(const Tensor<T>& x, int k, int pad, int oh, int ow, int od,
               std::vector<T>& col) {
    const std::size_t P = std::size_t(oh) * ow * od;
    col.assign(std::size_t(x.c) * k * k * k * P, T(0));
    std::size_t r = 0;
    for (int ci = 0; ci < x.c; ++ci)
        for (int kx = 0; kx < k; ++kx)
            for (int ky = 0; ky < k; ++ky)
                for (int kz = 0; kz < k; ++kz, ++r) {
                    T* dst = col.data() + r * P;
                    const int xo_lo = std::max(0, pad - kx);
                    const int xo_hi = std::min(oh, x.h + pad - kx);
                    const int yo_lo = std::max(0, pad - ky);
                    const int yo_hi = std::min(ow, x.w + pad - ky);
                    const int zo_lo = std::max(0, pad - kz);
                    const int zo_hi = std::min(od, x.d + pad - kz);
                    const int zshift = kz - pad;
                    for (int xo = xo_lo; xo < xo_hi; ++xo) {
                        const int xi = xo + kx - pad;
                        for (int yo = yo_lo; yo < yo_hi; ++yo) {
                            const T* src = x.row(ci, xi, yo + ky - pad) + zshift;
                            T* out = dst + (std::size_t(xo) * ow + yo) * od;
                            for (int z = zo_lo; z < zo_hi; ++z) out[z] = src[z];
                        }
                    }
                }
}

/// Scatter-adds a column matrix back into spatial form; adjoint of im2col_s1.
template <typename T>
void col2im_add_s1(const std::vector<T>& col, int k, int pad, int oh, int ow, int od,
                   Tensor<T>& x) {
    const std::size_t P = std::size_t(oh) * ow * od;
    std::size_t r = 0;
    for (int ci = 0; ci < x.c; ++ci)
        for (int kx = 0; kx < k; ++kx)
            for (int ky = 0; ky < k; ++ky)
                for (int kz = 0; kz < k; ++kz, ++r) {
                    const T* src = col.data() + r * P;
                    const int xo_lo = std::max(0, pad - kx);
                    const int xo_hi = std::min(oh, x.h + pad - kx);
                    const int yo_lo = std::max(0, pad - ky);
                    const int yo_hi = std::min(ow, x.w + pad - ky);
                    const int zo_lo = std::max(0, pad - kz);
                    const int zo_hi = std::min(od, x.d + pad - kz);
                    const int zshift = kz - pad;
                    for (int xo = xo_lo; xo < xo_hi; ++xo) {
                        const int xi = xo + kx - pad;
                        for (int yo = yo_lo; yo < yo_hi; ++yo) {
                            T* dst = x.row(ci, xi, yo + ky - pad) + zshift;
                            const T* in = src + (std::size_t(xo) * ow + yo) * od;
                            for (int z = zo_lo; z < zo_hi; ++z) dst[z] += in[z];
                        }
                    }
                }
}

} // namespace detail

/// Direct convolution, zero padding. The stride-1 path keeps the contiguous
/// z axis innermost so the compiler can vectorize it.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const ConvParam<T>& p, int stride, int pad) {
    if (x.c != p.c_in) throw std::invalid_argument("conv3d: channel mismatch");
    const int oh = conv_out_dim(x.h, p.k, stride, pad);
    const int ow = conv_out_dim(x.w, p.k, stride, pad);
    const int od = conv_out_dim(x.d, p.k, stride, pad);
    if (oh < 1 || ow < 1 || od < 1)
        throw std::invalid_argument("conv3d: input smaller than kernel");
    Tensor<T> y(p.c_out, oh, ow, od);

    if (stride == 1) {
        // im2col + GEMM: the weight matrix is already (c_out, c_in*k^3)
        // row-major, and (c, h, w, d) output layout is the GEMM result as-is
        const int P = oh * ow * od;
        const int K = p.c_in * p.k * p.k * p.k;
        if (p.k == 1 && pad == 0) {
            detail::gemm(p.c_out, P, K, p.w.data(), x.v.data(), y.v.data());
        } else {
            std::vector<T> col;
            detail::im2col_s1(x, p.k, pad, oh, ow, od, col);
            detail::gemm(p.c_out, P, K, p.w.data(), col.data(), y.v.data());
        }
        for (int co = 0; co < p.c_out; ++co) {
            const T bias = p.b[std::size_t(co)];
            T* row = y.v.data() + std::size_t(co) * P;
            for (int i = 0; i < P; ++i) row[i] += bias;
        }
        return y;
    }

    for (int co = 0; co < p.c_out; ++co) {
        const T bias = p.b[std::size_t(co)];
        for (int xo = 0; xo < oh; ++xo)
            for (int yo = 0; yo < ow; ++yo) {
                T* row = y.row(co, xo, yo);
                for (int z = 0; z < od; ++z) row[z] = bias;
            }
    }

    // generic strided path; used by the stem and the downsampling convs,
    // which all act on small tensors
    for (int co = 0; co < p.c_out; ++co)
        for (int xo = 0; xo < oh; ++xo)
            for (int yo = 0; yo < ow; ++yo)
                for (int zo = 0; zo < od; ++zo) {
                    T acc = y.at(co, xo, yo, zo);
                    for (int ci = 0; ci < p.c_in; ++ci)
                        for (int kx = 0; kx < p.k; ++kx) {
                            const int xi = xo * stride + kx - pad;
                            if (xi < 0 || xi >= x.h) continue;
                            for (int ky = 0; ky < p.k; ++ky) {
                                const int yi = yo * stride + ky - pad;
                                if (yi < 0 || yi >= x.w) continue;
                                const T* xrow = x.row(ci, xi, yi);
                                for (int kz = 0; kz < p.k; ++kz) {
                                    const int zi = zo * stride + kz - pad;
                                    if (zi < 0 || zi >= x.d) continue;
                                    acc += p.w[p.widx(co, ci, kx, ky, kz)] * xrow[zi];
                                }
                            }
                        }
                    y.at(co, xo, yo, zo) = acc;
                }
    return y;
}

template <typename T>
struct ConvGrads {
    Tensor<T> grad_x;
    std::vector<T> grad_w;
    std::vector<T> grad_b;
};

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const ConvParam<T>& p, int stride, int pad,
                             const Tensor<T>& grad_y) {
    ConvGrads<T> g;
    g.grad_x = Tensor<T>(x.c, x.h, x.w, x.d);
    g.grad_w.assign(p.w.size(), T(0));
    g.grad_b.assign(p.b.size(), T(0));

    for (int co = 0; co < p.c_out; ++co) {
        T acc = 0;
        for (int xo = 0; xo < grad_y.h; ++xo)
            for (int yo = 0; yo < grad_y.w; ++yo) {
                const T* row = grad_y.row(co, xo, yo);
                for (int z = 0; z < grad_y.d; ++z) acc += row[z];
            }
        g.grad_b[std::size_t(co)] = acc;
    }

    if (stride == 1) {
        const int oh = grad_y.h, ow = grad_y.w, od = grad_y.d;
        const int P = oh * ow * od;
        const int K = p.c_in * p.k * p.k * p.k;
        if (p.k == 1 && pad == 0) {
            // col is x itself; grad_col lands directly in grad_x
            detail::gemm_nt(p.c_out, K, P, grad_y.v.data(), x.v.data(), g.grad_w.data());
            std::vector<T> wt(std::size_t(K) * p.c_out);
            for (int co = 0; co < p.c_out; ++co)
                for (int r = 0; r < K; ++r)
                    wt[std::size_t(r) * p.c_out + co] = p.w[std::size_t(co) * K + r];
            detail::gemm(K, P, p.c_out, wt.data(), grad_y.v.data(), g.grad_x.v.data());
            return g;
        }
        std::vector<T> col;
        detail::im2col_s1(x, p.k, pad, oh, ow, od, col);
        // grad_w = grad_y * col^T, both traversed along contiguous rows
        detail::gemm_nt(p.c_out, K, P, grad_y.v.data(), col.data(), g.grad_w.data());
        std::vector<T> wt(std::size_t(K) * p.c_out);
        for (int co = 0; co < p.c_out; ++co)
            for (int r = 0; r < K; ++r)
                wt[std::size_t(r) * p.c_out + co] = p.w[std::size_t(co) * K + r];
        std::vector<T> grad_col(std::size_t(K) * P);
        detail::gemm(K, P, p.c_out, wt.data(), grad_y.v.data(), grad_col.data());
        detail::col2im_add_s1(grad_col, p.k, pad, oh, ow, od, g.grad_x);
        return g;
    }

    for (int co = 0; co < p.c_out; ++co)
        for (int xo = 0; xo < grad_y.h; ++xo)
            for (int yo = 0; yo < grad_y.w; ++yo)
                for (int zo = 0; zo < grad_y.d; ++zo) {
                    const T gv = grad_y.at(co, xo, yo, zo);
                    if (gv == T(0)) continue;
                    for (int ci = 0; ci < p.c_in; ++ci)
                        for (int kx = 0; kx < p.k; ++kx) {
                            const int xi = xo * stride + kx - pad;
                            if (xi < 0 || xi >= x.h) continue;
                            for (int ky = 0; ky < p.k; ++ky) {
                                const int yi = yo * stride + ky - pad;
                                if (yi < 0 || yi >= x.w) continue;
                                for (int kz = 0; kz < p.k; ++kz) {
                                    const int zi = zo * stride + kz - pad;
                                    if (zi < 0 || zi >= x.d) continue;
                                    g.grad_w[p.widx(co, ci, kx, ky, kz)] +=
                                        gv * x.at(ci, xi, yi, zi);
                                    g.grad_x.at(ci, xi, yi, zi) +=
                                        gv * p.w[p.widx(co, ci, kx, ky, kz)];
                                }
                            }
                        }
                }
    return g;
}

/// Exact GELU: x * Phi(x). Smooth, so finite-difference checks behave.
template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <typename T>
T gelu_grad(T x) {
    const T phi = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
    const T dens = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
    return phi + x * dens;
}

template <typename T>
void gelu_inplace(Tensor<T>& x) {
    for (auto& v : x.v) v = gelu(v);
}

/// grad wrt the pre-activation, given the pre-activation values.
template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& pre, const Tensor<T>& grad_y) {
    Tensor<T> g(pre.c, pre.h, pre.w, pre.d);
    for (std::size_t i = 0; i < pre.v.size(); ++i)
        g.v[i] = grad_y.v[i] * gelu_grad(pre.v[i]);
    return g;
}

/// Replicate-pad the high side of each spatial axis up to a multiple of m.
template <typename T>
Tensor<T> pad_high_to_multiple(const Tensor<T>& x, int m) {
    const int ph = (m - x.h % m) % m;
    const int pw = (m - x.w % m) % m;
    const int pd = (m - x.d % m) % m;
    if (ph == 0 && pw == 0 && pd == 0) return x;
    Tensor<T> y(x.c, x.h + ph, x.w + pw, x.d + pd);
    for (int c = 0; c < x.c; ++c)
        for (int xi = 0; xi < y.h; ++xi)
            for (int yi = 0; yi < y.w; ++yi) {
                const T* src = x.row(c, std::min(xi, x.h - 1), std::min(yi, x.w - 1));
                T* dst = y.row(c, xi, yi);
                for (int zi = 0; zi < y.d; ++zi) dst[zi] = src[std::min(zi, x.d - 1)];
            }
    return y;
}

/// Adjoint of pad_high_to_multiple: folds padded-cell gradients back onto the
/// replicated edge cells.
template <typename T>
Tensor<T> pad_high_backward(const Tensor<T>& grad_y, const ivec3& orig_shape) {
    Tensor<T> g(grad_y.c, orig_shape[0], orig_shape[1], orig_shape[2]);
    for (int c = 0; c < grad_y.c; ++c)
        for (int xi = 0; xi < grad_y.h; ++xi)
            for (int yi = 0; yi < grad_y.w; ++yi) {
                const T* src = grad_y.row(c, xi, yi);
                const int tx = std::min(xi, orig_shape[0] - 1);
                const int ty = std::min(yi, orig_shape[1] - 1);
                T* dst = g.row(c, tx, ty);
                for (int zi = 0; zi < grad_y.d; ++zi)
                    dst[std::min(zi, orig_shape[2] - 1)] += src[zi];
            }
    return g;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.spatial() != b.spatial())
        throw std::invalid_argument("concat_channels: spatial shapes differ");
    Tensor<T> y(a.c + b.c, a.h, a.w, a.d);
    std::copy(a.v.begin(), a.v.end(), y.v.begin());
    std::copy(b.v.begin(), b.v.end(), y.v.begin() + std::ptrdiff_t(a.v.size()));
    return y;
}

template <typename T>
void split_channels(const Tensor<T>& y, Tensor<T>& a, Tensor<T>& b, int ca) {
    a = Tensor<T>(ca, y.h, y.w, y.d);
    b = Tensor<T>(y.c - ca, y.h, y.w, y.d);
    std::copy(y.v.begin(), y.v.begin() + std::ptrdiff_t(a.v.size()), a.v.begin());
    std::copy(y.v.begin() + std::ptrdiff_t(a.v.size()), y.v.end(), b.v.begin());
}

/// Affine-free batch normalization over a set of maps that form one batch.
/// Normalization uses the population variance; running variance is stored with
/// the unbiased convention.
template <typename T>
struct BnStats {
    std::vector<double> mean, var; // per channel, population
    std::int64_t count = 0;        // elements per channel
};

template <typename T>
BnStats<T> bn_compute_stats(const std::vector<const Tensor<T>*>& zs) {
    const int c = zs.front()->c;
    BnStats<T> s;
    s.mean.assign(std::size_t(c), 0.0);
    s.var.assign(std::size_t(c), 0.0);
    for (const auto* z : zs) {
        if (z->c != c) throw std::invalid_argument("bn: channel mismatch");
        s.count += z->spatial_size();
    }
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (const auto* z : zs) {
            const T* p = z->v.data() + std::size_t(ch) * z->spatial_size();
            for (std::int64_t i = 0; i < z->spatial_size(); ++i) acc += double(p[i]);
        }
        s.mean[std::size_t(ch)] = acc / double(s.count);
        double vacc = 0;
        for (const auto* z : zs) {
            const T* p = z->v.data() + std::size_t(ch) * z->spatial_size();
            for (std::int64_t i = 0; i < z->spatial_size(); ++i) {
                const double d = double(p[i]) - s.mean[std::size_t(ch)];
                vacc += d * d;
            }
        }
        s.var[std::size_t(ch)] = vacc / double(s.count);
    }
    return s;
}

template <typename T>
void bn_apply(Tensor<T>& z, const std::vector<double>& mean, const std::vector<double>& var,
              double eps) {
    for (int ch = 0; ch < z.c; ++ch) {
        const T mu = T(mean[std::size_t(ch)]);
        const T inv = T(1.0 / std::sqrt(var[std::size_t(ch)] + eps));
        T* p = z.v.data() + std::size_t(ch) * z.spatial_size();
        for (std::int64_t i = 0; i < z.spatial_size(); ++i) p[i] = (p[i] - mu) * inv;
    }
}

/// Backward through joint batch normalization. ys are the normalized values,
/// gys their gradients; both lists span the whole batch. Writes grad wrt the
/// pre-normalization inputs back into gys.
template <typename T>
void bn_backward(const std::vector<const Tensor<T>*>& ys, std::vector<Tensor<T>*>& gys,
                 const BnStats<T>& stats, double eps) {
    const int c = ys.front()->c;
    for (int ch = 0; ch < c; ++ch) {
        double sum_dy = 0, sum_dyy = 0;
        for (std::size_t b = 0; b < ys.size(); ++b) {
            const T* y = ys[b]->v.data() + std::size_t(ch) * ys[b]->spatial_size();
            const T* dy = gys[b]->v.data() + std::size_t(ch) * gys[b]->spatial_size();
            for (std::int64_t i = 0; i < ys[b]->spatial_size(); ++i) {
                sum_dy += double(dy[i]);
                sum_dyy += double(dy[i]) * double(y[i]);
            }
        }
        const double mean_dy = sum_dy / double(stats.count);
        const double mean_dyy = sum_dyy / double(stats.count);
        const double inv = 1.0 / std::sqrt(stats.var[std::size_t(ch)] + eps);
        for (std::size_t b = 0; b < ys.size(); ++b) {
            const T* y = ys[b]->v.data() + std::size_t(ch) * ys[b]->spatial_size();
            T* dy = gys[b]->v.data() + std::size_t(ch) * gys[b]->spatial_size();
            for (std::int64_t i = 0; i < ys[b]->spatial_size(); ++i)
                dy[i] = T(inv * (double(dy[i]) - mean_dy - double(y[i]) * mean_dyy));
        }
    }
}

} // namespace nn
} // namespace ape
