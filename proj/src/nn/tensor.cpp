#include "steerfuse/nn/ops.hpp"
#include "steerfuse/nn/tensor.hpp"

namespace steerfuse::nn {

std::string to_string(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            s += "x";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

Conv2dShape conv_geometry(const Shape& input, const Shape& weights, Stride stride)
{
    if (weights.size() != 4) {
        throw ShapeError("conv2d weights must be OC x IC x KH x KW, got " + to_string(weights));
    }
    auto [batch, inner] = split_batch(input, 3);
    if (inner[0] != weights[1]) {
        throw ShapeError("conv2d input " + to_string(input) + " has " + std::to_string(inner[0]) +
                         " channels but weights " + to_string(weights) + " expect " + std::to_string(weights[1]));
    }
    if (stride.h == 0 || stride.w == 0) {
        throw ShapeError("conv2d stride must be positive");
    }
    if (inner[1] < weights[2] || inner[2] < weights[3]) {
        throw ShapeError("conv2d kernel " + to_string(weights) + " larger than input " + to_string(input));
    }
    Conv2dShape g;
    g.batch = batch;
    g.in_channels = inner[0];
    g.in_h = inner[1];
    g.in_w = inner[2];
    g.out_channels = weights[0];
    g.kernel_h = weights[2];
    g.kernel_w = weights[3];
    g.stride_h = stride.h;
    g.stride_w = stride.w;
    return g;
}

} // namespace detail
} // namespace steerfuse::nn
