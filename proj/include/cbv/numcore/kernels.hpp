#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>

// Compute kernels used by the graph executor.
//
// cbv::numcore::kernels holds the OpenMP versions. Parallelism is only ever
// over independent output elements; every reduction runs serially inside one
// iteration in a fixed index order. Together with -ffp-contract=off this
// makes results bit-identical for any thread count.
//
// cbv::numcore::kernels::serial holds plain reference loops with the same
// per-output accumulation order. Tests compare the two paths bit-exactly.

namespace cbv::numcore::kernels {

inline constexpr std::int64_t kParallelCutoff = 1 << 12;

template <bool Acc = false, typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::int64_t M = static_cast<std::int64_t>(m), K = static_cast<std::int64_t>(k),
                       N = static_cast<std::int64_t>(n);
#pragma omp parallel for if (M * N * K > kParallelCutoff)
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t j = 0; j < N; ++j) {
            T acc = T(0);
            for (std::int64_t p = 0; p < K; ++p) acc += a[i * K + p] * b[p * N + j];
            if constexpr (Acc)
                c[i * N + j] += acc;
            else
                c[i * N + j] = acc;
        }
    }
}

/// c[k,n] = sum_m a[m,k] * b[m,n]  (i.e. a^T b)
template <bool Acc = false, typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::int64_t M = static_cast<std::int64_t>(m), K = static_cast<std::int64_t>(k),
                       N = static_cast<std::int64_t>(n);
#pragma omp parallel for if (M * N * K > kParallelCutoff)
    for (std::int64_t i = 0; i < K; ++i) {
        for (std::int64_t j = 0; j < N; ++j) {
            T acc = T(0);
            for (std::int64_t p = 0; p < M; ++p) acc += a[p * K + i] * b[p * N + j];
            if constexpr (Acc)
                c[i * N + j] += acc;
            else
                c[i * N + j] = acc;
        }
    }
}

/// c[m,k] = sum_n a[m,n] * b[k,n]  (i.e. a b^T)
template <bool Acc = false, typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::int64_t M = static_cast<std::int64_t>(m), K = static_cast<std::int64_t>(k),
                       N = static_cast<std::int64_t>(n);
#pragma omp parallel for if (M * N * K > kParallelCutoff)
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t j = 0; j < K; ++j) {
            T acc = T(0);
            for (std::int64_t p = 0; p < N; ++p) acc += a[i * N + p] * b[j * N + p];
            if constexpr (Acc)
                c[i * K + j] += acc;
            else
                c[i * K + j] = acc;
        }
    }
}

/// 2-D convolution, "same" zero padding, stride 1, odd kernel.
/// x: [C,H,W], w: [F,C,KH,KW], y: [F,H,W]
template <bool Acc = false, typename T>
void conv2d(const T* x, const T* w, T* y, std::size_t c, std::size_t h, std::size_t wd, std::size_t f,
            std::size_t kh, std::size_t kw) {
    const std::int64_t C = c, H = h, W = wd, F = f, KH = kh, KW = kw;
    const std::int64_t PH = KH / 2, PW = KW / 2;
#pragma omp parallel for collapse(2) if (F * H * W * C * KH * KW > kParallelCutoff)
    for (std::int64_t of = 0; of < F; ++of) {
        for (std::int64_t oy = 0; oy < H; ++oy) {
            for (std::int64_t ox = 0; ox < W; ++ox) {
                T acc = T(0);
                for (std::int64_t ic = 0; ic < C; ++ic) {
                    for (std::int64_t ky = 0; ky < KH; ++ky) {
                        const std::int64_t iy = oy + ky - PH;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t kx = 0; kx < KW; ++kx) {
                            const std::int64_t ix = ox + kx - PW;
                            if (ix < 0 || ix >= W) continue;
                            acc += x[(ic * H + iy) * W + ix] * w[((of * C + ic) * KH + ky) * KW + kx];
                        }
                    }
                }
                if constexpr (Acc)
                    y[(of * H + oy) * W + ox] += acc;
                else
                    y[(of * H + oy) * W + ox] = acc;
            }
        }
    }
}

/// gx[c,iy,ix] = sum_{f,ky,kx} gy[f, iy+ky-PH reversed] * w[f,c,ky,kx], gather form.
template <bool Acc = false, typename T>
void conv2d_grad_input(const T* gy, const T* w, T* gx, std::size_t c, std::size_t h, std::size_t wd,
                       std::size_t f, std::size_t kh, std::size_t kw) {
    const std::int64_t C = c, H = h, W = wd, F = f, KH = kh, KW = kw;
    const std::int64_t PH = KH / 2, PW = KW / 2;
#pragma omp parallel for collapse(2) if (F * H * W * C * KH * KW > kParallelCutoff)
    for (std::int64_t ic = 0; ic < C; ++ic) {
        for (std::int64_t iy = 0; iy < H; ++iy) {
            for (std::int64_t ix = 0; ix < W; ++ix) {
                T acc = T(0);
                for (std::int64_t of = 0; of < F; ++of) {
                    for (std::int64_t ky = 0; ky < KH; ++ky) {
                        const std::int64_t oy = iy - ky + PH;
                        if (oy < 0 || oy >= H) continue;
                        for (std::int64_t kx = 0; kx < KW; ++kx) {
                            const std::int64_t ox = ix - kx + PW;
                            if (ox < 0 || ox >= W) continue;
                            acc += gy[(of * H + oy) * W + ox] * w[((of * C + ic) * KH + ky) * KW + kx];
                        }
                    }
                }
                if constexpr (Acc)
                    gx[(ic * H + iy) * W + ix] += acc;
                else
                    gx[(ic * H + iy) * W + ix] = acc;
            }
        }
    }
}

/// gw[f,c,ky,kx] = sum_{oy,ox} gy[f,oy,ox] * x[c, oy+ky-PH, ox+kx-PW]
template <bool Acc = false, typename T>
void conv2d_grad_weight(const T* gy, const T* x, T* gw, std::size_t c, std::size_t h, std::size_t wd,
                        std::size_t f, std::size_t kh, std::size_t kw) {
    const std::int64_t C = c, H = h, W = wd, F = f, KH = kh, KW = kw;
    const std::int64_t PH = KH / 2, PW = KW / 2;
#pragma omp parallel for collapse(2) if (F * H * W * C * KH * KW > kParallelCutoff)
    for (std::int64_t of = 0; of < F; ++of) {
        for (std::int64_t ic = 0; ic < C; ++ic) {
            for (std::int64_t ky = 0; ky < KH; ++ky) {
                for (std::int64_t kx = 0; kx < KW; ++kx) {
                    T acc = T(0);
                    for (std::int64_t oy = 0; oy < H; ++oy) {
                        const std::int64_t iy = oy + ky - PH;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t ox = 0; ox < W; ++ox) {
                            const std::int64_t ix = ox + kx - PW;
                            if (ix < 0 || ix >= W) continue;
                            acc += gy[(of * H + oy) * W + ox] * x[(ic * H + iy) * W + ix];
                        }
                    }
                    const std::size_t wi = ((of * C + ic) * KH + ky) * KW + kx;
                    if constexpr (Acc)
                        gw[wi] += acc;
                    else
                        gw[wi] = acc;
                }
            }
        }
    }
}

template <typename T>
void relu(const T* x, T* y, std::size_t n) {
    const std::int64_t N = static_cast<std::int64_t>(n);
#pragma omp parallel for if (N > kParallelCutoff)
    for (std::int64_t i = 0; i < N; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

/// Accumulating backward; the subgradient at exactly 0 is 0.
template <typename T>
void relu_grad(const T* x, const T* gy, T* gx, std::size_t n) {
    const std::int64_t N = static_cast<std::int64_t>(n);
#pragma omp parallel for if (N > kParallelCutoff)
    for (std::int64_t i = 0; i < N; ++i) {
        if (x[i] > T(0)) gx[i] += gy[i];
    }
}

/// Non-overlapping k x k average pooling; H and W must be divisible by k.
template <bool Acc = false, typename T>
void avgpool2d(const T* x, T* y, std::size_t c, std::size_t h, std::size_t w, std::size_t k) {
    const std::int64_t C = c, H = h, W = w, K = k;
    const std::int64_t OH = H / K, OW = W / K;
    const T inv = T(1) / static_cast<T>(K * K);
#pragma omp parallel for collapse(2) if (C * H * W > kParallelCutoff)
    for (std::int64_t ic = 0; ic < C; ++ic) {
        for (std::int64_t oy = 0; oy < OH; ++oy) {
            for (std::int64_t ox = 0; ox < OW; ++ox) {
                T acc = T(0);
                for (std::int64_t ky = 0; ky < K; ++ky)
                    for (std::int64_t kx = 0; kx < K; ++kx)
                        acc += x[(ic * H + oy * K + ky) * W + ox * K + kx];
                if constexpr (Acc)
                    y[(ic * OH + oy) * OW + ox] += acc * inv;
                else
                    y[(ic * OH + oy) * OW + ox] = acc * inv;
            }
        }
    }
}

template <typename T>
void avgpool2d_grad(const T* gy, T* gx, std::size_t c, std::size_t h, std::size_t w, std::size_t k) {
    const std::int64_t C = c, H = h, W = w, K = k;
    const std::int64_t OH = H / K, OW = W / K;
    const T inv = T(1) / static_cast<T>(K * K);
#pragma omp parallel for collapse(2) if (C * H * W > kParallelCutoff)
    for (std::int64_t ic = 0; ic < C; ++ic) {
        for (std::int64_t iy = 0; iy < H; ++iy) {
            for (std::int64_t ix = 0; ix < W; ++ix) {
                gx[(ic * H + iy) * W + ix] += gy[(ic * OH + iy / K) * OW + ix / K] * inv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
    const std::int64_t R = static_cast<std::int64_t>(rows), C = static_cast<std::int64_t>(cols);
#pragma omp parallel for if (R * C > kParallelCutoff)
    for (std::int64_t r = 0; r < R; ++r) {
        const T* xr = x + r * C;
        T* yr = y + r * C;
        T m = xr[0];
        for (std::int64_t j = 1; j < C; ++j) m = std::max(m, xr[j]);
        T s = T(0);
        for (std::int64_t j = 0; j < C; ++j) {
            yr[j] = std::exp(xr[j] - m);
            s += yr[j];
        }
        const T inv = T(1) / s;
        for (std::int64_t j = 0; j < C; ++j) yr[j] *= inv;
    }
}

/// Corner-aligned bilinear resize of a single-channel map. The source and
/// destination corners coincide; sample coordinates use the factor
/// (src-1)/(dst-1). A destination extent of 1 samples the top-left corner.
template <typename T>
void bilinear_resize(const T* src, T* dst, std::size_t sh, std::size_t sw, std::size_t dh, std::size_t dw) {
    const std::int64_t SH = sh, SW = sw, DH = dh, DW = dw;
    const double fy = (DH > 1 && SH > 1) ? static_cast<double>(SH - 1) / static_cast<double>(DH - 1) : 0.0;
    const double fx = (DW > 1 && SW > 1) ? static_cast<double>(SW - 1) / static_cast<double>(DW - 1) : 0.0;
#pragma omp parallel for if (DH * DW > kParallelCutoff)
    for (std::int64_t dy = 0; dy < DH; ++dy) {
        const double ry = fy * static_cast<double>(dy);
        const std::int64_t y0 = static_cast<std::int64_t>(ry);
        const std::int64_t y1 = std::min(y0 + 1, SH - 1);
        const double wy = ry - static_cast<double>(y0);
        for (std::int64_t dx = 0; dx < DW; ++dx) {
            const double rx = fx * static_cast<double>(dx);
            const std::int64_t x0 = static_cast<std::int64_t>(rx);
            const std::int64_t x1 = std::min(x0 + 1, SW - 1);
            const double wx = rx - static_cast<double>(x0);
            const double v00 = src[y0 * SW + x0], v01 = src[y0 * SW + x1];
            const double v10 = src[y1 * SW + x0], v11 = src[y1 * SW + x1];
            const double top = v00 * (1.0 - wx) + v01 * wx;
            const double bot = v10 * (1.0 - wx) + v11 * wx;
            dst[dy * DW + dx] = static_cast<T>(top * (1.0 - wy) + bot * wy);
        }
    }
}

namespace serial {

template <bool Acc = false, typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            if constexpr (Acc)
                c[i * n + j] += acc;
            else
                c[i * n + j] = acc;
        }
    }
}

template <bool Acc = false, typename T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < m; ++p) acc += a[p * k + i] * b[p * n + j];
            if constexpr (Acc)
                c[i * n + j] += acc;
            else
                c[i * n + j] = acc;
        }
    }
}

template <bool Acc = false, typename T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < n; ++p) acc += a[i * n + p] * b[j * n + p];
            if constexpr (Acc)
                c[i * k + j] += acc;
            else
                c[i * k + j] = acc;
        }
    }
}

template <bool Acc = false, typename T>
void conv2d(const T* x, const T* w, T* y, std::size_t c, std::size_t h, std::size_t wd, std::size_t f,
            std::size_t kh, std::size_t kw) {
    const std::int64_t C = c, H = h, W = wd, F = f, KH = kh, KW = kw;
    const std::int64_t PH = KH / 2, PW = KW / 2;
    for (std::int64_t of = 0; of < F; ++of) {
        for (std::int64_t oy = 0; oy < H; ++oy) {
            for (std::int64_t ox = 0; ox < W; ++ox) {
                T acc = T(0);
                for (std::int64_t ic = 0; ic < C; ++ic) {
                    for (std::int64_t ky = 0; ky < KH; ++ky) {
                        const std::int64_t iy = oy + ky - PH;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t kx = 0; kx < KW; ++kx) {
                            const std::int64_t ix = ox + kx - PW;
                            if (ix < 0 || ix >= W) continue;
                            acc += x[(ic * H + iy) * W + ix] * w[((of * C + ic) * KH + ky) * KW + kx];
                        }
                    }
                }
                if constexpr (Acc)
                    y[(of * H + oy) * W + ox] += acc;
                else
                    y[(of * H + oy) * W + ox] = acc;
            }
        }
    }
}

template <bool Acc = false, typename T>
void conv2d_grad_input(const T* gy, const T* w, T* gx, std::size_t c, std::size_t h, std::size_t wd,
                       std::size_t f, std::size_t kh, std::size_t kw) {
    const std::int64_t C = c, H = h, W = wd, F = f, KH = kh, KW = kw;
    const std::int64_t PH = KH / 2, PW = KW / 2;
    for (std::int64_t ic = 0; ic < C; ++ic) {
        for (std::int64_t iy = 0; iy < H; ++iy) {
            for (std::int64_t ix = 0; ix < W; ++ix) {
                T acc = T(0);
                for (std::int64_t of = 0; of < F; ++of) {
                    for (std::int64_t ky = 0; ky < KH; ++ky) {
                        const std::int64_t oy = iy - ky + PH;
                        if (oy < 0 || oy >= H) continue;
                        for (std::int64_t kx = 0; kx < KW; ++kx) {
                            const std::int64_t ox = ix - kx + PW;
                            if (ox < 0 || ox >= W) continue;
                            acc += gy[(of * H + oy) * W + ox] * w[((of * C + ic) * KH + ky) * KW + kx];
                        }
                    }
                }
                if constexpr (Acc)
                    gx[(ic * H + iy) * W + ix] += acc;
                else
                    gx[(ic * H + iy) * W + ix] = acc;
            }
        }
    }
}

template <bool Acc = false, typename T>
void conv2d_grad_weight(const T* gy, const T* x, T* gw, std::size_t c, std::size_t h, std::size_t wd,
                        std::size_t f, std::size_t kh, std::size_t kw) {
    const std::int64_t C = c, H = h, W = wd, F = f, KH = kh, KW = kw;
    const std::int64_t PH = KH / 2, PW = KW / 2;
    for (std::int64_t of = 0; of < F; ++of) {
        for (std::int64_t ic = 0; ic < C; ++ic) {
            for (std::int64_t ky = 0; ky < KH; ++ky) {
                for (std::int64_t kx = 0; kx < KW; ++kx) {
                    T acc = T(0);
                    for (std::int64_t oy = 0; oy < H; ++oy) {
                        const std::int64_t iy = oy + ky - PH;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t ox = 0; ox < W; ++ox) {
                            const std::int64_t ix = ox + kx - PW;
                            if (ix < 0 || ix >= W) continue;
                            acc += gy[(of * H + oy) * W + ox] * x[(ic * H + iy) * W + ix];
                        }
                    }
                    const std::size_t wi = ((of * C + ic) * KH + ky) * KW + kx;
                    if constexpr (Acc)
                        gw[wi] += acc;
                    else
                        gw[wi] = acc;
                }
            }
        }
    }
}

template <typename T>
void relu(const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_grad(const T* x, const T* gy, T* gx, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (x[i] > T(0)) gx[i] += gy[i];
    }
}

template <bool Acc = false, typename T>
void avgpool2d(const T* x, T* y, std::size_t c, std::size_t h, std::size_t w, std::size_t k) {
    const std::size_t oh = h / k, ow = w / k;
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::size_t ic = 0; ic < c; ++ic) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = T(0);
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx)
                        acc += x[(ic * h + oy * k + ky) * w + ox * k + kx];
                if constexpr (Acc)
                    y[(ic * oh + oy) * ow + ox] += acc * inv;
                else
                    y[(ic * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
}

template <typename T>
void avgpool2d_grad(const T* gy, T* gx, std::size_t c, std::size_t h, std::size_t w, std::size_t k) {
    const std::size_t oh = h / k, ow = w / k;
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::size_t ic = 0; ic < c; ++ic)
        for (std::size_t iy = 0; iy < h; ++iy)
            for (std::size_t ix = 0; ix < w; ++ix)
                gx[(ic * h + iy) * w + ix] += gy[(ic * oh + iy / k) * ow + ix / k] * inv;
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = y + r * cols;
        T m = xr[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
        T s = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - m);
            s += yr[j];
        }
        const T inv = T(1) / s;
        for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

template <typename T>
void bilinear_resize(const T* src, T* dst, std::size_t sh, std::size_t sw, std::size_t dh, std::size_t dw) {
    const double fy = (dh > 1 && sh > 1) ? static_cast<double>(sh - 1) / static_cast<double>(dh - 1) : 0.0;
    const double fx = (dw > 1 && sw > 1) ? static_cast<double>(sw - 1) / static_cast<double>(dw - 1) : 0.0;
    for (std::size_t dy = 0; dy < dh; ++dy) {
        const double ry = fy * static_cast<double>(dy);
        const std::size_t y0 = static_cast<std::size_t>(ry);
        const std::size_t y1 = std::min(y0 + 1, sh - 1);
        const double wy = ry - static_cast<double>(y0);
        for (std::size_t dx = 0; dx < dw; ++dx) {
            const double rx = fx * static_cast<double>(dx);
            const std::size_t x0 = static_cast<std::size_t>(rx);
            const std::size_t x1 = std::min(x0 + 1, sw - 1);
            const double wx = rx - static_cast<double>(x0);
            const double v00 = src[y0 * sw + x0], v01 = src[y0 * sw + x1];
            const double v10 = src[y1 * sw + x0], v11 = src[y1 * sw + x1];
            const double top = v00 * (1.0 - wx) + v01 * wx;
            const double bot = v10 * (1.0 - wx) + v11 * wx;
            dst[dy * dw + dx] = static_cast<T>(top * (1.0 - wy) + bot * wy);
        }
    }
}

}  // namespace serial
}  // namespace cbv::numcore::kernels
