#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace steerfuse::nn {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);

inline std::size_t element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major n-d array. Image tensors are channel-first (C x H x W),
/// batched image tensors are N x C x H x W.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape))
    {
        check_extents(shape_);
        data_.assign(element_count(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        check_extents(shape_);
        if (element_count(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    /// Same data, new extents. Element count must be preserved.
    void reshape(Shape shape)
    {
        check_extents(shape);
        if (element_count(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        shape_ = std::move(shape);
    }

    Tensor reshaped(Shape shape) const
    {
        Tensor out = *this;
        out.reshape(std::move(shape));
        return out;
    }

    /// Returns sample `n` of a batched tensor as its own tensor.
    Tensor sample(std::size_t n) const
    {
        if (rank() < 2 || n >= shape_[0]) {
            throw ShapeError("sample index out of range for " + to_string(shape_));
        }
        Shape inner(shape_.begin() + 1, shape_.end());
        const std::size_t stride = element_count(inner);
        std::vector<T> values(data_.begin() + static_cast<std::ptrdiff_t>(n * stride),
                              data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * stride));
        return Tensor(std::move(inner), std::move(values));
    }

    bool operator==(const Tensor& other) const = default;

private:
    static void check_extents(const Shape& shape)
    {
        for (std::size_t extent : shape) {
            if (extent == 0) {
                throw ShapeError("tensor extents must be positive, got " + to_string(shape));
            }
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t)
{
    for (T v : t.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

/// Adds a leading batch axis of extent 1.
template <typename T>
Tensor<T> batched(Tensor<T> t)
{
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    t.reshape(std::move(s));
    return t;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t)
{
    std::vector<To> values(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        values[i] = static_cast<To>(t[i]);
    }
    return Tensor<To>(t.shape(), std::move(values));
}

} // namespace steerfuse::nn
