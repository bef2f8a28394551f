#pragma once

// Test-only oracles: naive convolution and central finite differences.

#include "steerfuse/nn/tensor.hpp"
#include "steerfuse/util/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace steerfuse::testing {

using nn::Tensor;

inline Tensor<double> random_tensor(nn::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor<double> t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

/// Direct quadruple-loop valid convolution on one C x H x W image.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                 std::size_t sh, std::size_t sw)
{
    const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = (h - kh) / sh + 1, ow = (wd - kw) / sw + 1;
    Tensor<double> y({oc, oh, ow});
    for (std::size_t o = 0; o < oc; ++o) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = b[o];
                for (std::size_t ci = 0; ci < c; ++ci) {
                    for (std::size_t u = 0; u < kh; ++u) {
                        for (std::size_t v = 0; v < kw; ++v) {
                            acc += x[(ci * h + i * sh + u) * wd + j * sw + v] * w[((o * c + ci) * kh + u) * kw + v];
                        }
                    }
                }
                y[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    return y;
}

/// Relative error with a small floor on the denominator so exact zeros compare cleanly.
inline double relative_error(double analytic, double numeric)
{
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

/// Central difference of `loss` with respect to `value`, step h.
inline double central_difference(double& value, const std::function<double()>& loss, double h = 1e-5)
{
    const double saved = value;
    value = saved + h;
    const double up = loss();
    value = saved - h;
    const double down = loss();
    value = saved;
    return (up - down) / (2.0 * h);
}

/// Max relative error between analytic gradient `grad` and finite
/// differences of `loss` over every entry of `param`.
inline double max_gradient_error(Tensor<double>& param, const Tensor<double>& grad,
                                 const std::function<double()>& loss, double h = 1e-5)
{
    double worst = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double numeric = central_difference(param[i], loss, h);
        worst = std::max(worst, relative_error(grad[i], numeric));
    }
    return worst;
}

/// Weighted sum sum_i r_i * y_i, a scalar probe for backward passes.
inline double probe(const Tensor<double>& y, const Tensor<double>& r)
{
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += y[i] * r[i];
    }
    return s;
}

} // namespace steerfuse::testing
