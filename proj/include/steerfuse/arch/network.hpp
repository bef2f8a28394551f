#pragma once

#include "steerfuse/nn/layers.hpp"
#include "steerfuse/nn/ops.hpp"
#include "steerfuse/nn/tensor.hpp"

#include <array>
#include <span>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace steerfuse::arch {

using nn::Shape;
using nn::Tensor;

enum class Variant { camera, lidar, dual, cgdual };
enum class Modality { camera, lidar };

/// Architecture ids used on the command line and in checkpoint headers:
/// camera, lidar, dual, cgdual.
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view id);
std::string_view to_string(Modality m);

bool uses(Variant v, Modality m);

class GeometryError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ConvLayerGeometry {
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    bool operator==(const ConvLayerGeometry&) const = default;
};

struct BlockGeometry {
    std::size_t in_channels = 0;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    std::vector<ConvLayerGeometry> layers;
    bool operator==(const BlockGeometry&) const = default;
};

struct Geometry {
    BlockGeometry camera;
    BlockGeometry lidar;
    std::size_t hidden = 100;
    bool operator==(const Geometry&) const = default;
};

/// Camera 3x63x306 and lidar 4x11x310 inputs with the PilotNet-style
/// 24/36/48/64/64 channel progression.
Geometry full_resolution_geometry();
/// Camera 3x32x153 and lidar 4x11x155 inputs, same channel progression.
Geometry half_resolution_geometry();

struct LayerShape {
    std::string name;
    Shape output;
};

/// Per-layer output shapes (unbatched) for one conv block. Throws
/// GeometryError naming the first layer whose output extent is not positive.
std::vector<LayerShape> block_shapes(const BlockGeometry& g, std::string_view name);

/// Full ledger of intermediate shapes for a variant, ending with the head
/// input, hidden layer and scalar output (plus the gate vector for cgdual).
std::vector<LayerShape> shape_ledger(Variant v, const Geometry& g);

std::size_t flattened_features(const BlockGeometry& g);
std::size_t head_input_features(Variant v, const Geometry& g);
std::size_t gate_count(const Geometry& g);

/// Per-channel input statistics computed on the training split.
struct NormStats {
    std::array<double, 3> camera_mean{0.0, 0.0, 0.0};
    std::array<double, 3> camera_std{1.0, 1.0, 1.0};
    std::array<double, 4> lidar_mean{0.0, 0.0, 0.0, 0.0};
    std::array<double, 4> lidar_std{1.0, 1.0, 1.0, 1.0};
    bool operator==(const NormStats&) const = default;
};

void validate(const NormStats& s);

/// Normalizes a C x H x W (or N x C x H x W) buffer in place.
template <typename T, std::size_t C>
void normalize_channels(std::span<T> data, std::size_t plane, const std::array<double, C>& mean,
                        const std::array<double, C>& stddev)
{
    const std::size_t per_sample = C * plane;
    for (std::size_t base = 0; base + per_sample <= data.size(); base += per_sample) {
        for (std::size_t c = 0; c < C; ++c) {
            const T m = static_cast<T>(mean[c]);
            const T inv = static_cast<T>(1.0 / stddev[c]);
            T* p = data.data() + base + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                p[i] = (p[i] - m) * inv;
            }
        }
    }
}

/// Multiplies channel c of each feature map by gates[c] (camera) or
/// gates[64 + c] (lidar). gates: N x 128; features N x 64 x h x w.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> apply_gates(const Tensor<T>& gates, const Tensor<T>& camera_features,
                                            const Tensor<T>& lidar_features);

template <typename T>
struct GateGrads {
    Tensor<T> gates;
    Tensor<T> camera_features;
    Tensor<T> lidar_features;
};

template <typename T>
GateGrads<T> apply_gates_backward(const Tensor<T>& gates, const Tensor<T>& camera_features,
                                  const Tensor<T>& lidar_features, const Tensor<T>& camera_upstream,
                                  const Tensor<T>& lidar_upstream);

/// Five valid convolutions, each followed by ReLU.
template <typename T>
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(const BlockGeometry& g, const std::string& name, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x);
    /// Returns d(loss)/d(input) unless `input_grad` is false (then empty).
    Tensor<T> backward(const Tensor<T>& upstream, bool input_grad = true);

    /// Post-ReLU output of every conv layer from the last forward pass.
    const std::vector<Tensor<T>>& activations() const { return activations_; }
    const std::vector<nn::Conv2d<T>>& layers() const { return layers_; }
    std::vector<nn::Conv2d<T>>& layers() { return layers_; }
    const BlockGeometry& geometry() const { return geometry_; }
    void collect(std::vector<nn::Parameter<T>*>& out);

private:
    BlockGeometry geometry_;
    std::vector<nn::Conv2d<T>> layers_;
    std::vector<Tensor<T>> activations_;
};

template <typename T>
struct Inputs {
    const Tensor<T>* camera = nullptr;
    const Tensor<T>* lidar = nullptr;
};

/// One of the four steering models. Inputs are batched N x C x H x W and
/// already normalized; the output is N x 1 steering-wheel degrees.
template <typename T>
class Network {
public:
    Network(Variant variant, Geometry geometry, std::uint64_t seed);

    Tensor<T> forward(Inputs<T> in);
    /// Backpropagates d(loss)/d(output) (N x 1) and accumulates parameter gradients.
    void backward(const Tensor<T>& upstream);

    /// Single unbatched sample.
    T predict(const Tensor<T>* camera, const Tensor<T>* lidar);

    std::vector<nn::Parameter<T>*> parameters();
    std::vector<const nn::Parameter<T>*> parameters() const;
    void zero_grad();
    std::size_t parameter_count() const;

    /// Replaces the gating subnetwork's output with a constant (cgdual only).
    void set_gate_override(std::optional<T> value) { gate_override_ = value; }
    std::optional<T> gate_override() const { return gate_override_; }

    Variant variant() const { return variant_; }
    const Geometry& geometry() const { return geometry_; }
    std::uint64_t seed() const { return seed_; }

    const ConvBlock<T>* steering_block(Modality m) const;
    /// Steering block output entering the head, after gating for cgdual.
    const Tensor<T>* block_output(Modality m) const;
    const Tensor<T>& gates() const { return gates_; }

private:
    void require(const Inputs<T>& in) const;

    Variant variant_;
    Geometry geometry_;
    std::uint64_t seed_;

    std::optional<ConvBlock<T>> camera_;
    std::optional<ConvBlock<T>> lidar_;
    nn::Dense<T> hidden_;
    nn::Dense<T> output_;

    std::optional<ConvBlock<T>> gate_camera_;
    std::optional<ConvBlock<T>> gate_lidar_;
    std::optional<nn::Dense<T>> gate_dense_;
    std::optional<T> gate_override_;

    // forward caches
    Tensor<T> camera_features_;
    Tensor<T> lidar_features_;
    Tensor<T> camera_out_;
    Tensor<T> lidar_out_;
    Tensor<T> hidden_out_;
    Tensor<T> gates_;
    std::size_t batch_ = 0;
};

extern template class ConvBlock<float>;
extern template class ConvBlock<double>;
extern template class Network<float>;
extern template class Network<double>;

} // namespace steerfuse::arch
