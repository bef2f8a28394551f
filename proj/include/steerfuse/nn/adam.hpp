#pragma once

#include "steerfuse/nn/layers.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace steerfuse::nn {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam. First and second moments are kept per parameter
/// tensor, in the order the parameter list is presented.
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    std::uint64_t step_count() const { return step_; }
    void set_step_count(std::uint64_t s) { step_ = s; }
    const std::vector<Tensor<T>>& first_moments() const { return m_; }
    const std::vector<Tensor<T>>& second_moments() const { return v_; }

    void step(const std::vector<Parameter<T>*>& params)
    {
        for (const Parameter<T>* p : params) {
            for (T g : p->grad.data()) {
                if (!std::isfinite(g)) {
                    throw NonFiniteGradient("non-finite gradient in parameter '" + p->name + "'");
                }
            }
        }
        if (m_.empty()) {
            for (const Parameter<T>* p : params) {
                m_.emplace_back(p->value.shape());
                v_.emplace_back(p->value.shape());
            }
        }
        if (m_.size() != params.size()) {
            throw ShapeError("adam: parameter list changed between steps");
        }
        ++step_;
        const double t = static_cast<double>(step_);
        const T b1 = static_cast<T>(config_.beta1);
        const T b2 = static_cast<T>(config_.beta2);
        const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, t));
        const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, t));
        const T lr = static_cast<T>(config_.lr);
        const T eps = static_cast<T>(config_.eps);
        for (std::size_t k = 0; k < params.size(); ++k) {
            Parameter<T>& p = *params[k];
            if (m_[k].shape() != p.value.shape()) {
                throw ShapeError("adam: moment shape " + to_string(m_[k].shape()) + " does not match '" + p.name +
                                 "' " + to_string(p.value.shape()));
            }
            T* value = p.value.data().data();
            const T* grad = p.grad.data().data();
            T* m = m_[k].data().data();
            T* v = v_[k].data().data();
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                m[i] = b1 * m[i] + (T{1} - b1) * grad[i];
                v[i] = b2 * v[i] + (T{1} - b2) * grad[i] * grad[i];
                const T m_hat = m[i] / c1;
                const T v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
            }
        }
    }

private:
    AdamConfig config_;
    std::uint64_t step_ = 0;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
};

} // namespace steerfuse::nn
