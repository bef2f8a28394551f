#include "steerfuse/nn/kernels.hpp"

#include <algorithm>

namespace steerfuse::nn::serial {

template <typename T>
void conv2d_forward(const Conv2dShape& s, const T* input, const T* weights, const T* bias, T* output)
{
    const std::size_t oh = s.out_h();
    const std::size_t ow = s.out_w();
    for (std::size_t n = 0; n < s.batch; ++n) {
        const T* x = input + n * s.in_channels * s.in_h * s.in_w;
        T* y = output + n * s.out_channels * oh * ow;
        for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    T acc = bias ? bias[oc] : T{0};
                    for (std::size_t ic = 0; ic < s.in_channels; ++ic) {
                        for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
                            for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
                                const std::size_t iy = oy * s.stride_h + ky;
                                const std::size_t ix = ox * s.stride_w + kx;
                                acc += x[(ic * s.in_h + iy) * s.in_w + ix] *
                                       weights[((oc * s.in_channels + ic) * s.kernel_h + ky) * s.kernel_w + kx];
                            }
                        }
                    }
                    y[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const Conv2dShape& s, const T* input, const T* weights, const T* upstream,
                     T* input_grad, T* weight_grad, T* bias_grad)
{
    const std::size_t oh = s.out_h();
    const std::size_t ow = s.out_w();
    std::fill(input_grad, input_grad + s.input_count(), T{0});
    std::fill(weight_grad, weight_grad + s.weight_count(), T{0});
    std::fill(bias_grad, bias_grad + s.out_channels, T{0});
    for (std::size_t n = 0; n < s.batch; ++n) {
        const T* x = input + n * s.in_channels * s.in_h * s.in_w;
        T* dx = input_grad + n * s.in_channels * s.in_h * s.in_w;
        const T* dy = upstream + n * s.out_channels * oh * ow;
        for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const T g = dy[(oc * oh + oy) * ow + ox];
                    bias_grad[oc] += g;
                    for (std::size_t ic = 0; ic < s.in_channels; ++ic) {
                        for (std::size_t ky = 0; ky < s.kernel_h; ++ky) {
                            for (std::size_t kx = 0; kx < s.kernel_w; ++kx) {
                                const std::size_t xi = (ic * s.in_h + oy * s.stride_h + ky) * s.in_w +
                                                       ox * s.stride_w + kx;
                                const std::size_t wi =
                                    ((oc * s.in_channels + ic) * s.kernel_h + ky) * s.kernel_w + kx;
                                weight_grad[wi] += g * x[xi];
                                dx[xi] += g * weights[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void dense_forward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                   const T* bias, T* output)
{
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t o = 0; o < out; ++o) {
            T acc = bias ? bias[o] : T{0};
            for (std::size_t i = 0; i < in; ++i) {
                acc += input[n * in + i] * weights[o * in + i];
            }
            output[n * out + o] = acc;
        }
    }
}

template <typename T>
void dense_backward(std::size_t batch, std::size_t in, std::size_t out, const T* input, const T* weights,
                    const T* upstream, T* input_grad, T* weight_grad, T* bias_grad)
{
    std::fill(input_grad, input_grad + batch * in, T{0});
    std::fill(weight_grad, weight_grad + out * in, T{0});
    std::fill(bias_grad, bias_grad + out, T{0});
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t o = 0; o < out; ++o) {
            const T g = upstream[n * out + o];
            bias_grad[o] += g;
            for (std::size_t i = 0; i < in; ++i) {
                weight_grad[o * in + i] += g * input[n * in + i];
                input_grad[n * in + i] += g * weights[o * in + i];
            }
        }
    }
}

#define STEERFUSE_INSTANTIATE(T)                                                                          \
    template void conv2d_forward<T>(const Conv2dShape&, const T*, const T*, const T*, T*);                \
    template void conv2d_backward<T>(const Conv2dShape&, const T*, const T*, const T*, T*, T*, T*);       \
    template void dense_forward<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, const T*,   \
                                   T*);                                                                   \
    template void dense_backward<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, const T*,  \
                                    T*, T*, T*);

STEERFUSE_INSTANTIATE(float)
STEERFUSE_INSTANTIATE(double)
#undef STEERFUSE_INSTANTIATE

} // namespace steerfuse::nn::serial
