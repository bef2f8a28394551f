#pragma once

#include "steerfuse/lidar/range_image.hpp"
#include "steerfuse/nn/tensor.hpp"
#include "steerfuse/util/rng.hpp"

#include <array>
#include <span>
#include <string_view>

namespace steerfuse::augment {

/// Sensor displacement relative to the recording pose. Lateral is positive
/// to the left; the sensor moves by +offset so scene points move by -offset.
struct PoseOffset {
    double lateral = 0.0;
    double vertical = 0.0;
    double yaw = 0.0;

    void validate() const;
    bool operator==(const PoseOffset&) const = default;
};

/// theta - w * d. Unit-agnostic: theta and w must share the angle unit.
double correct_steering(double theta, double d, double w);

enum class GainUnit { rad_per_m, deg_per_m };
GainUnit parse_gain_unit(std::string_view s);
std::string_view to_string(GainUnit u);
/// Gain expressed in steering-wheel degrees per meter.
double gain_deg_per_m(double w, GainUnit unit);

/// Range image the sensor would record at `offset`. Within each ring, output
/// cells interpolate XYZ linearly in azimuth between the two bracketing
/// translated samples; samples whose ranges differ by more than
/// `gap_threshold` are not bridged and the azimuth-nearest one is used alone.
/// Reflectance and zero echoes come from the azimuth-nearest sample. Each
/// output point is re-intersected with the local surface along the cell's
/// firing direction; cells without contributing samples are zero.
lidar::RangeImage augment_lidar(const lidar::RangeImage& image, const PoseOffset& offset, double gap_threshold = 3.0);

// Camera images are 3 x H x W YUV (BT.601): Y in [0, 1], U and V centered on 0.

std::array<float, 3> yuv_to_rgb(std::array<float, 3> yuv);
std::array<float, 3> rgb_to_yuv(std::array<float, 3> rgb);

struct ColorTransform {
    double hue_deg = 0.0;
    double gamma = 1.0;
    double saturation = 1.0;
};

/// Hue rotation about the gray axis, then gamma, then saturation scaling,
/// each followed by a clamp to [0, 1].
std::array<float, 3> transform_rgb(std::array<float, 3> rgb, const ColorTransform& t);
nn::Tensor<float> apply_color_transform(const nn::Tensor<float>& yuv, const ColorTransform& t);

/// Multiplies RGB by `factor` and clamps; large factors saturate to white.
nn::Tensor<float> overexpose(const nn::Tensor<float>& yuv, double factor);

struct JitterConfig {
    double hue_deg = 8.0;              // hue shift drawn from [-hue_deg, hue_deg]
    std::array<double, 2> gamma{0.8, 1.25};
    std::array<double, 2> saturation{0.7, 1.3};
    std::array<double, 2> reflectance{0.9, 1.1}; // per-row factor range

    void validate() const;
};

ColorTransform sample_color_transform(const JitterConfig& cfg, Rng& rng);
nn::Tensor<float> jitter_camera(const nn::Tensor<float>& yuv, const JitterConfig& cfg, Rng& rng);

/// Multiplies row r's reflectance channel by factors[r]. Zero cells stay zero.
lidar::RangeImage scale_reflectance_rows(const lidar::RangeImage& image, std::span<const double> factors);
lidar::RangeImage jitter_reflectance_rows(const lidar::RangeImage& image, const JitterConfig& cfg, Rng& rng);

} // namespace steerfuse::augment
