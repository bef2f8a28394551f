#pragma once

// Functional forms of the layer set. Image inputs may be C x H x W or
// batched N x C x H x W; the batch axis is carried through unchanged.

#include "steerfuse/nn/kernels.hpp"
#include "steerfuse/nn/tensor.hpp"

#include <cmath>
#include <span>
#include <utility>
#include <vector>

namespace steerfuse::nn {

struct Stride {
    std::size_t h = 1;
    std::size_t w = 1;
};

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
struct DenseGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

namespace detail {

inline std::pair<std::size_t, Shape> split_batch(const Shape& s, std::size_t inner_rank)
{
    if (s.size() == inner_rank) {
        return {1, s};
    }
    if (s.size() == inner_rank + 1) {
        return {s[0], Shape(s.begin() + 1, s.end())};
    }
    throw ShapeError("expected rank " + std::to_string(inner_rank) + " or " + std::to_string(inner_rank + 1) +
                     ", got " + to_string(s));
}

Conv2dShape conv_geometry(const Shape& input, const Shape& weights, Stride stride);

} // namespace detail

/// Valid (unpadded) 2-D convolution. weights: OC x IC x KH x KW, bias: OC.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, Stride stride)
{
    const Conv2dShape g = detail::conv_geometry(input.shape(), weights.shape(), stride);
    if (bias.size() != g.out_channels) {
        throw ShapeError("conv2d bias " + to_string(bias.shape()) + " does not match weights " +
                         to_string(weights.shape()));
    }
    Shape out = {g.out_channels, g.out_h(), g.out_w()};
    if (input.rank() == 4) {
        out.insert(out.begin(), g.batch);
    }
    Tensor<T> y(out);
    parallel::conv2d_forward(g, input.data().data(), weights.data().data(), bias.data().data(), y.data().data());
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& upstream, const Tensor<T>& cached_input, const Tensor<T>& weights,
                             Stride stride, bool input_grad = true)
{
    if (cached_input.empty()) {
        throw ShapeError("conv2d_backward: missing cached input");
    }
    const Conv2dShape g = detail::conv_geometry(cached_input.shape(), weights.shape(), stride);
    if (upstream.size() != g.output_count()) {
        throw ShapeError("conv2d_backward: upstream " + to_string(upstream.shape()) +
                         " does not match forward output for input " + to_string(cached_input.shape()));
    }
    ConvGrads<T> grads{input_grad ? Tensor<T>(cached_input.shape()) : Tensor<T>(), Tensor<T>(weights.shape()),
                       Tensor<T>({g.out_channels})};
    parallel::conv2d_backward(g, cached_input.data().data(), weights.data().data(), upstream.data().data(),
                              input_grad ? grads.input.data().data() : nullptr, grads.weights.data().data(),
                              grads.bias.data().data());
    return grads;
}

/// Affine map over the last axis. input: [N x] IN, weights: OUT x IN.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias)
{
    if (weights.rank() != 2) {
        throw ShapeError("dense weights must be OUT x IN, got " + to_string(weights.shape()));
    }
    auto [batch, inner] = detail::split_batch(input.shape(), 1);
    const std::size_t in = weights.dim(1);
    const std::size_t out = weights.dim(0);
    if (inner[0] != in || bias.size() != out) {
        throw ShapeError("dense: input " + to_string(input.shape()) + " incompatible with weights " +
                         to_string(weights.shape()) + " and bias " + to_string(bias.shape()));
    }
    Shape shape = input.rank() == 2 ? Shape{batch, out} : Shape{out};
    Tensor<T> y(shape);
    parallel::dense_forward(batch, in, out, input.data().data(), weights.data().data(), bias.data().data(),
                            y.data().data());
    return y;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& upstream, const Tensor<T>& cached_input, const Tensor<T>& weights)
{
    if (cached_input.empty()) {
        throw ShapeError("dense_backward: missing cached input");
    }
    auto [batch, inner] = detail::split_batch(cached_input.shape(), 1);
    const std::size_t in = weights.dim(1);
    const std::size_t out = weights.dim(0);
    if (inner[0] != in || upstream.size() != batch * out) {
        throw ShapeError("dense_backward: upstream " + to_string(upstream.shape()) + " / input " +
                         to_string(cached_input.shape()) + " incompatible with weights " +
                         to_string(weights.shape()));
    }
    DenseGrads<T> grads{Tensor<T>(cached_input.shape()), Tensor<T>(weights.shape()), Tensor<T>({out})};
    parallel::dense_backward(batch, in, out, cached_input.data().data(), weights.data().data(),
                             upstream.data().data(), grads.input.data().data(), grads.weights.data().data(),
                             grads.bias.data().data());
    return grads;
}

template <typename T>
Tensor<T> relu(Tensor<T> x)
{
    for (T& v : x.data()) {
        v = v > T{0} ? v : T{0};
    }
    return x;
}

/// Gradient through relu, given the forward output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream, const Tensor<T>& output)
{
    if (upstream.shape() != output.shape()) {
        throw ShapeError("relu_backward: " + to_string(upstream.shape()) + " vs " + to_string(output.shape()));
    }
    Tensor<T> g = upstream;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(output[i] > T{0})) {
            g[i] = T{0};
        }
    }
    return g;
}

template <typename T>
T sigmoid(T x)
{
    // Split on sign so exp never overflows.
    if (x >= T{0}) {
        return T{1} / (T{1} + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x)
{
    for (T& v : x.data()) {
        v = sigmoid(v);
    }
    return x;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& upstream, const Tensor<T>& output)
{
    if (upstream.shape() != output.shape()) {
        throw ShapeError("sigmoid_backward: " + to_string(upstream.shape()) + " vs " + to_string(output.shape()));
    }
    Tensor<T> g = upstream;
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] *= output[i] * (T{1} - output[i]);
    }
    return g;
}

/// Collapses all axes after the batch axis. `batch_axis` false flattens fully.
template <typename T>
Tensor<T> flatten(Tensor<T> x, bool batch_axis = true)
{
    if (batch_axis && x.rank() >= 2) {
        const std::size_t n = x.dim(0);
        x.reshape({n, x.size() / n});
    } else {
        x.reshape({x.size()});
    }
    return x;
}

/// Concatenation along the last axis; leading axes must agree.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>* const> parts)
{
    if (parts.empty()) {
        throw ShapeError("concat of zero tensors");
    }
    const Shape& first = parts[0]->shape();
    Shape lead(first.begin(), first.end() - 1);
    std::size_t last = 0;
    for (const Tensor<T>* p : parts) {
        Shape l(p->shape().begin(), p->shape().end() - 1);
        if (l != lead) {
            throw ShapeError("concat: leading axes differ: " + to_string(first) + " vs " + to_string(p->shape()));
        }
        last += p->shape().back();
    }
    const std::size_t rows = element_count(lead);
    Shape out = lead;
    out.push_back(last);
    Tensor<T> y(out);
    std::size_t offset = 0;
    for (const Tensor<T>* p : parts) {
        const std::size_t w = p->shape().back();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p->data().begin() + static_cast<std::ptrdiff_t>(r * w), w,
                        y.data().begin() + static_cast<std::ptrdiff_t>(r * last + offset));
        }
        offset += w;
    }
    return y;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b)
{
    const Tensor<T>* parts[] = {&a, &b};
    return concat<T>(std::span<const Tensor<T>* const>(parts));
}

/// Splits the last axis of `upstream` back into pieces of the given widths.
template <typename T>
std::vector<Tensor<T>> concat_backward(const Tensor<T>& upstream, std::span<const std::size_t> widths)
{
    const Shape& s = upstream.shape();
    Shape lead(s.begin(), s.end() - 1);
    const std::size_t rows = element_count(lead);
    const std::size_t last = s.back();
    std::size_t total = 0;
    for (std::size_t w : widths) {
        total += w;
    }
    if (total != last) {
        throw ShapeError("concat_backward: widths do not sum to " + std::to_string(last));
    }
    std::vector<Tensor<T>> out;
    std::size_t offset = 0;
    for (std::size_t w : widths) {
        Shape shape = lead;
        shape.push_back(w);
        Tensor<T> piece(shape);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(upstream.data().begin() + static_cast<std::ptrdiff_t>(r * last + offset), w,
                        piece.data().begin() + static_cast<std::ptrdiff_t>(r * w));
        }
        out.push_back(std::move(piece));
        offset += w;
    }
    return out;
}

template <typename T>
struct LossResult {
    T value;
    Tensor<T> grad;
};

/// Mean squared error over all elements, with d(loss)/d(pred) = 2(pred - target)/N.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target)
{
    if (pred.empty()) {
        throw ShapeError("mse_loss: empty batch");
    }
    if (pred.size() != target.size()) {
        throw ShapeError("mse_loss: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
    }
    const T n = static_cast<T>(pred.size());
    LossResult<T> r{T{0}, Tensor<T>(pred.shape())};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred[i] - target[i];
        r.value += d * d;
        r.grad[i] = T{2} * d / n;
    }
    r.value /= n;
    return r;
}

} // namespace steerfuse::nn
