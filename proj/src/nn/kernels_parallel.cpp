#include "steerfuse/nn/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>
#include <vector>

namespace steerfuse::nn {

int kernel_threads()
{
    return omp_get_max_threads();
}

namespace parallel {
namespace {

// Register tile sizes. NR spans a few SIMD registers per row so the
// accumulator block stays in registers.
template <typename T>
struct Tile;
template <>
struct Tile<float> {
    static constexpr std::size_t mr = 4;
    static constexpr std::size_t nr = 64;
};
template <>
struct Tile<double> {
    static constexpr std::size_t mr = 4;
    static constexpr std::size_t nr = 32;
};

// C tile = sum_p A(r, p) * B(p, j). A is addressed through (row, col) strides
// so the same tile serves A and A^T.
template <typename T>
void gemm_tile(std::size_t k, const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, std::size_t ldb, T* c,
               std::size_t ldc, std::size_t rows, std::size_t cols)
{
    constexpr std::size_t MR = Tile<T>::mr;
    constexpr std::size_t NR = Tile<T>::nr;
    alignas(64) T acc[MR][NR] = {};
    if (rows == MR && cols == NR) {
        for (std::size_t p = 0; p < k; ++p) {
            const T* bp = b + p * ldb;
            for (std::size_t r = 0; r < MR; ++r) {
                const T av = a[r * a_rs + p * a_cs];
#pragma omp simd
                for (std::size_t j = 0; j < NR; ++j) {
                    acc[r][j] += av * bp[j];
                }
            }
        }
    } else {
        for (std::size_t p = 0; p < k; ++p) {
            const T* bp = b + p * ldb;
            for (std::size_t r = 0; r < rows; ++r) {
                const T av = a[r * a_rs + p * a_cs];
                for (std::size_t j = 0; j < cols; ++j) {
                    acc[r][j] += av * bp[j];
                }
            }
        }
    }
    for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(c + r * ldc, acc[r], cols * sizeof(T));
    }
}

template <typename T>
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_cs,
                  const T* b, T* c)
{
    constexpr std::size_t MR = Tile<T>::mr;
    constexpr std::size_t NR = Tile<T>::nr;
    const std::ptrdiff_t row_tiles = static_cast<std::ptrdiff_t>((m + MR - 1) / MR);
    const std::ptrdiff_t col_tiles = static_cast<std::ptrdiff_t>((n + NR - 1) / NR);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::ptrdiff_t tj = 0; tj < col_tiles; ++tj) {
        for (std::ptrdiff_t ti = 0; ti < row_tiles; ++ti) {
            const std::size_t i0 = static_cast<std::size_t>(ti) * MR;
            const std::size_t j0 = static_cast<std::size_t>(tj) * NR;
            gemm_tile(k, a + i0 * a_rs, a_rs, a_cs, b + j0, n, c + i0 * n + j0, n, std::min(MR, m - i0),
                      std::min(NR, n - j0));
        }
    }
}

template <typename T>
std::vector<T>& workspace(int slot)
{
    thread_local std::vector<T> buffers[3];
    return buffers[slot];
}

// col[(ic*kh + ky)*kw + kx][n*P + oy*ow + ox] = x[n][ic][oy*sh + ky][ox*sw + kx]
template <typename T>
void im2col(const Conv2dShape& s, const T* input, T* col)
{
    const std::size_t oh = s.out_h();
    const std::size_t ow = s.out_w();
    const std::size_t positions = oh * ow;
    const std::size_t row_len = s.batch * positions;
    const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(s.batch * s.in_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / s.in_channels;
        const std::size_t ic = static_cast<std::size_t>(job) % s.in_channels;
        const T* plane = input + (n * s.in_channels + ic) * s.in_h * s.in_w;
        for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
                T* dst = col + ((ic * s.kernel_h + ky) * s.kernel_w + kx) * row_len + n * positions;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const T* src = plane + (oy * s.stride_h + ky) * s.in_w + kx;
                    T* d = dst + oy * ow;
                    if (s.stride_w == 1) {
                        std::memcpy(d, src, ow * sizeof(T));
                    } else {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            d[ox] = src[ox * s.stride_w];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const Conv2dShape& s, const T* col, T* input_grad)
{
    const std::size_t oh = s.out_h();
    const std::size_t ow = s.out_w();
    const std::size_t positions = oh * ow;
    const std::size_t row_len = s.batch * positions;
    const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(s.batch * s.in_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / s.in_channels;
        const std::size_t ic = static_cast<std::size_t>(job) % s.in_channels;
        T* plane = input_grad + (n * s.in_channels + ic) * s.in_h * s.in_w;
        std::fill(plane, plane + s.in_h * s.in_w, T{0});
        for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
                const T* src = col + ((ic * s.kernel_h + ky) * s.kernel_w + kx) * row_len + n * positions;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    T* d = plane + (oy * s.stride_h + ky) * s.in_w + kx;
                    const T* c = src + oy * ow;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        d[ox * s.stride_w] += c[ox];
                    }
                }
            }
        }
    }
}

} // namespace

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c)
{
    gemm_strided(m, n, k, a, k, 1, b, c);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c)
{
    gemm_strided(m, n, k, a, 1, m, b, c);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c)
{
    // Row-by-row dot products: each C entry reduces over k in lane-strided
    // partial sums, combined in a fixed order.
    constexpr std::size_t MR = 4;
    constexpr std::size_t NB = 4;
    constexpr std::size_t L = 64 / sizeof(T);
    const std::size_t k_main = k - k % L;
    const std::ptrdiff_t row_tiles = static_cast<std::ptrdiff_t>((m + MR - 1) / MR);
    const std::ptrdiff_t col_tiles = static_cast<std::ptrdiff_t>((n + NB - 1) / NB);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::ptrdiff_t tj = 0; tj < col_tiles; ++tj) {
        for (std::ptrdiff_t ti = 0; ti < row_tiles; ++ti) {
            const std::size_t i0 = static_cast<std::size_t>(ti) * MR;
            const std::size_t j0 = static_cast<std::size_t>(tj) * NB;
            const std::size_t rows = std::min(MR, m - i0);
            const std::size_t cols = std::min(NB, n - j0);
            alignas(64) T acc[MR][NB][L] = {};
            const T* ar[MR];
            const T* br[NB];
            for (std::size_t r = 0; r < MR; ++r) {
                ar[r] = a + (i0 + std::min(r, rows - 1)) * k;
            }
            for (std::size_t q = 0; q < NB; ++q) {
                br[q] = b + (j0 + std::min(q, cols - 1)) * k;
            }
            for (std::size_t p = 0; p < k_main; p += L) {
                for (std::size_t r = 0; r < MR; ++r) {
                    for (std::size_t q = 0; q < NB; ++q) {
#pragma omp simd
                        for (std::size_t l = 0; l < L; ++l) {
                            acc[r][q][l] += ar[r][p + l] * br[q][p + l];
                        }
                    }
                }
            }
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t q = 0; q < cols; ++q) {
                    T sum{0};
                    for (std::size_t l = 0; l < L; ++l) {
                        sum += acc[r][q][l];
                    }
                    for (std::size_t p = k_main; p < k; ++p) {
                        sum += ar[r][p] * br[q][p];
                    }
                    c[(i0 + r) * n + j0 + q] = sum;
                }
            }
        }
    }
}

template <typename T>
void conv2d_forward(const Conv2dShape& s, const T* input, const T* weights, const T* bias, T* output)
{
    const std::size_t positions = s.out_h() * s.out_w();
    const std::size_t row_len = s.batch * positions;
    std::vector<T>& col = workspace<T>(0);
    std::vector<T>& out = workspace<T>(1);
    col.resize(s.patch_size() * row_len);
    out.resize(s.out_channels * row_len);
    im2col(s, input, col.data());
    gemm_nn(s.out_channels, row_len, s.patch_size(), weights, col.data(), out.data());
    const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(s.batch * s.out_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / s.out_channels;
        const std::size_t oc = static_cast<std::size_t>(job) % s.out_channels;
        const T b = bias ? bias[oc] : T{0};
        const T* src = out.data() + oc * row_len + n * positions;
        T* dst = output + (n * s.out_channels + oc) * positions;
        for (std::size_t p = 0; p < positions; ++p) {
            dst[p] = src[p] + b;
        }
    }
}

template <typename T>
void conv2d_backward(const Conv2dShape& s, const T* input, const T* weights, const T* upstream,
                     T* input_grad, T* weight_grad, T* bias_grad)
{
    const std::size_t positions = s.out_h() * s.out_w();
    const std::size_t row_len = s.batch * positions;
    std::vector<T>& col = workspace<T>(0);
    std::vector<T>& dy = workspace<T>(1);
    std::vector<T>& dcol = workspace<T>(2);
    col.resize(s.patch_size() * row_len);
    dy.resize(s.out_channels * row_len);
    if (input_grad) {
        dcol.resize(s.patch_size() * row_len);
    }

    // upstream N x OC x P  ->  OC x (N*P)
    const std::ptrdiff_t oc_count = static_cast<std::ptrdiff_t>(s.out_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t oc = 0; oc < oc_count; ++oc) {
        const std::size_t o = static_cast<std::size_t>(oc);
        T sum{0};
        for (std::size_t n = 0; n < s.batch; ++n) {
            const T* src = upstream + (n * s.out_channels + o) * positions;
            T* dst = dy.data() + o * row_len + n * positions;
            for (std::size_t p = 0; p < positions; ++p) {
                dst[p] = src[p];
                sum += src[p];
            }
        }
        bias_grad[o] = sum;
    }

    im2col(s, input, col.data());
    gemm_nt(s.out_channels, s.patch_size(), row_len, dy.data(), col.data(), weight_grad);
    if (input_grad) {
        gemm_tn(s.patch_size(), row_len, s.out_channels, weights, dy.data(), dcol.data());
        col2im(s, dcol.data(), input_grad);
    }
}

template <typename T>
void dense_forward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                   const T* bias, T* output)
{
    gemm_nt(batch, out, in, input, weights, output);
    if (bias) {
        for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t o = 0; o < out; ++o) {
                output[n * out + o] += bias[o];
            }
        }
    }
}

template <typename T>
void dense_backward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                    const T* upstream, T* input_grad, T* weight_grad, T* bias_grad)
{
    gemm_nn(batch, in, out, upstream, weights, input_grad);
    gemm_tn(out, in, batch, upstream, input, weight_grad);
    for (std::size_t o = 0; o < out; ++o) {
        T sum{0};
        for (std::size_t n = 0; n < batch; ++n) {
            sum += upstream[n * out + o];
        }
        bias_grad[o] = sum;
    }
}

#define STEERFUSE_INSTANTIATE(T)                                                                          \
    template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);              \
    template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);              \
    template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);              \
    template void conv2d_forward<T>(const Conv2dShape&, const T*, const T*, const T*, T*);                \
    template void conv2d_backward<T>(const Conv2dShape&, const T*, const T*, const T*, T*, T*, T*);       \
    template void dense_forward<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, const T*,   \
                                   T*);                                                                   \
    template void dense_backward<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, const T*,  \
                                    T*, T*, T*);

STEERFUSE_INSTANTIATE(float)
STEERFUSE_INSTANTIATE(double)
#undef STEERFUSE_INSTANTIATE

} // namespace parallel
} // namespace steerfuse::nn
