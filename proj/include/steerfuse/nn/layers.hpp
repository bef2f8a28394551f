#pragma once

#include "steerfuse/nn/ops.hpp"
#include "steerfuse/nn/tensor.hpp"
#include "steerfuse/util/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace steerfuse::nn {

enum class LayerKind { conv2d, dense, relu, sigmoid, flatten, concat, channel_gate };

/// Static description of one layer. Only conv2d and dense carry parameters.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    std::size_t in_features = 0;
    std::size_t out_features = 0;

    static LayerSpec conv(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw, std::size_t sh,
                          std::size_t sw)
    {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.in_channels = in_c;
        s.out_channels = out_c;
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.stride_h = sh;
        s.stride_w = sw;
        return s;
    }

    static LayerSpec dense(std::size_t in, std::size_t out)
    {
        LayerSpec s;
        s.kind = LayerKind::dense;
        s.in_features = in;
        s.out_features = out;
        return s;
    }

    bool operator==(const LayerSpec&) const = default;
};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

    void zero_grad() { grad.fill(T{0}); }
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
void glorot_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (T& v : w.data()) {
        v = static_cast<T>(rng.uniform(-limit, limit));
    }
}

template <typename T>
class Conv2d {
public:
    Conv2d() = default;

    Conv2d(const LayerSpec& spec, const std::string& name, Rng& rng)
        : spec_(spec),
          weight_(name + ".weight", {spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w}),
          bias_(name + ".bias", {spec.out_channels})
    {
        const std::size_t receptive = spec.kernel_h * spec.kernel_w;
        glorot_uniform(weight_.value, spec.in_channels * receptive, spec.out_channels * receptive, rng);
    }

    Tensor<T> forward(const Tensor<T>& x)
    {
        input_ = x;
        return conv2d_forward(x, weight_.value, bias_.value, stride());
    }

    /// Returns the input gradient, or an empty tensor when `input_grad` is false.
    Tensor<T> backward(const Tensor<T>& upstream, bool input_grad = true)
    {
        ConvGrads<T> g = conv2d_backward(upstream, input_, weight_.value, stride(), input_grad);
        accumulate(weight_.grad, g.weights);
        accumulate(bias_.grad, g.bias);
        return std::move(g.input);
    }

    Stride stride() const { return {spec_.stride_h, spec_.stride_w}; }
    const LayerSpec& spec() const { return spec_; }
    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    const Parameter<T>& weight() const { return weight_; }
    const Parameter<T>& bias() const { return bias_; }

private:
    static void accumulate(Tensor<T>& into, const Tensor<T>& g)
    {
        for (std::size_t i = 0; i < into.size(); ++i) {
            into[i] += g[i];
        }
    }

    LayerSpec spec_;
    Parameter<T> weight_;
    Parameter<T> bias_;
    Tensor<T> input_;
};

template <typename T>
class Dense {
public:
    Dense() = default;

    Dense(std::size_t in, std::size_t out, const std::string& name, Rng& rng)
        : spec_(LayerSpec::dense(in, out)), weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out})
    {
        glorot_uniform(weight_.value, in, out, rng);
    }

    Tensor<T> forward(const Tensor<T>& x)
    {
        input_ = x;
        return dense_forward(x, weight_.value, bias_.value);
    }

    Tensor<T> backward(const Tensor<T>& upstream)
    {
        DenseGrads<T> g = dense_backward(upstream, input_, weight_.value);
        for (std::size_t i = 0; i < weight_.grad.size(); ++i) {
            weight_.grad[i] += g.weights[i];
        }
        for (std::size_t i = 0; i < bias_.grad.size(); ++i) {
            bias_.grad[i] += g.bias[i];
        }
        return std::move(g.input);
    }

    const LayerSpec& spec() const { return spec_; }
    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    const Parameter<T>& weight() const { return weight_; }
    const Parameter<T>& bias() const { return bias_; }

private:
    LayerSpec spec_;
    Parameter<T> weight_;
    Parameter<T> bias_;
    Tensor<T> input_;
};

} // namespace steerfuse::nn
