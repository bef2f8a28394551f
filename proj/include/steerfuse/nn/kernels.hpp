#pragma once

// Compute kernels behind the nn layers. Two implementations share one
// signature set:
//
//   serial::   straightforward loops, kept as the reference the tests and
//              the benchmark compare against.
//   parallel:: batched im2col + blocked GEMM, OpenMP over independent output
//              blocks. Every reduction runs in a fixed order inside one
//              thread, so results do not depend on the thread count.
//
// All buffers are dense row-major. Backward kernels overwrite their outputs.

#include <cstddef>

namespace steerfuse::nn {

struct Conv2dShape {
    std::size_t batch = 1;
    std::size_t in_channels = 1;
    std::size_t in_h = 1;
    std::size_t in_w = 1;
    std::size_t out_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;

    std::size_t out_h() const { return (in_h - kernel_h) / stride_h + 1; }
    std::size_t out_w() const { return (in_w - kernel_w) / stride_w + 1; }
    std::size_t patch_size() const { return in_channels * kernel_h * kernel_w; }
    std::size_t weight_count() const { return out_channels * patch_size(); }
    std::size_t input_count() const { return batch * in_channels * in_h * in_w; }
    std::size_t output_count() const { return batch * out_channels * out_h() * out_w(); }
};

namespace serial {

template <typename T>
void conv2d_forward(const Conv2dShape& s, const T* input, const T* weights, const T* bias, T* output);

template <typename T>
void conv2d_backward(const Conv2dShape& s, const T* input, const T* weights, const T* upstream,
                     T* input_grad, T* weight_grad, T* bias_grad);

/// y[n, o] = sum_i x[n, i] * w[o, i] + b[o]
template <typename T>
void dense_forward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                   const T* bias, T* output);

template <typename T>
void dense_backward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                    const T* upstream, T* input_grad, T* weight_grad, T* bias_grad);

} // namespace serial

namespace parallel {

template <typename T>
void conv2d_forward(const Conv2dShape& s, const T* input, const T* weights, const T* bias, T* output);

/// `input_grad` may be null when the input needs no gradient (first layer).
template <typename T>
void conv2d_backward(const Conv2dShape& s, const T* input, const T* weights, const T* upstream,
                     T* input_grad, T* weight_grad, T* bias_grad);

template <typename T>
void dense_forward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                   const T* bias, T* output);

template <typename T>
void dense_backward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                    const T* upstream, T* input_grad, T* weight_grad, T* bias_grad);

// GEMM building blocks, exposed for the benchmark and kernel tests.
// C (m x n) = A (m x k) * B (k x n)
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
// C (m x n) = A (m x k) * B^T, B stored n x k
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
// C (m x n) = A^T * B, A stored k x m, B stored k x n
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);

} // namespace parallel

/// Number of OpenMP threads the parallel kernels will use.
int kernel_threads();

} // namespace steerfuse::nn
