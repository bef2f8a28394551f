#pragma once

#include "steerfuse/arch/network.hpp"
#include "steerfuse/nn/tensor.hpp"

#include <array>
#include <filesystem>
#include <span>

namespace steerfuse::vbp {

/// H x W saliency at the input resolution of one modality. Non-negative.
struct SaliencyMask {
    arch::Modality modality = arch::Modality::camera;
    nn::Tensor<float> values;
};

/// Mean over channels of a C x H x W (or 1 x C x H x W) activation.
nn::Tensor<float> channel_mean(const nn::Tensor<float>& activation);

/// Transposed convolution of an h x w map with an all-ones kernel of the
/// layer's size and stride, zero-padded to out_h x out_w.
nn::Tensor<float> upsample(const nn::Tensor<float>& map, const arch::ConvLayerGeometry& layer, std::size_t out_h,
                           std::size_t out_w);

/// Chains channel-mean maps from the last layer down to the input:
/// v = mean(last); for each earlier layer, v = upsample(v) * mean(layer);
/// finally upsample to the input. `activations` are post-ReLU, one per layer.
nn::Tensor<float> chain(std::span<const nn::Tensor<float>> activations, const arch::BlockGeometry& block);

/// Mask for one modality from the cached forward pass of a single sample.
/// For the gated model the last map is the gated block output. Throws
/// std::invalid_argument when the variant has no such modality.
SaliencyMask visual_backprop(arch::Network<float>& net, const nn::Tensor<float>* camera,
                             const nn::Tensor<float>* lidar, arch::Modality modality);

inline constexpr double log_epsilon = 1e-6;

/// log(1 + mask / eps) divided by its maximum; all-zero stays all-zero.
nn::Tensor<float> log_scale(const nn::Tensor<float>& mask, double eps = log_epsilon);

inline constexpr std::array<float, 3> cyan{0.0f, 1.0f, 1.0f};

/// 8-bit RGB image, row-major, 3 bytes per pixel.
struct RgbImage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<unsigned char> pixels;
};

/// Blends `color` over the YUV camera image with alpha = max_alpha * display.
RgbImage overlay_camera(const nn::Tensor<float>& display, const nn::Tensor<float>& camera_yuv,
                        std::array<float, 3> color = cyan, float max_alpha = 1.0f);

/// Mask in `color` over black on top, the range image's z channel in gray
/// below; 2R x C.
RgbImage overlay_lidar(const nn::Tensor<float>& display, const nn::Tensor<float>& range_image,
                       std::array<float, 3> color = cyan, float max_alpha = 1.0f);

/// Grayscale image of a [0, 1] map (values are clamped).
RgbImage gray(const nn::Tensor<float>& map);

/// PNG when built with libpng, binary PPM otherwise; returns the path written
/// (extension adjusted for the fallback).
std::filesystem::path write_image(const std::filesystem::path& path, const RgbImage& image);
bool png_supported();

} // namespace steerfuse::vbp
