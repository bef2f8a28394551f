#include "steerfuse/vbp/vbp.hpp"

#include "steerfuse/augment/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#ifdef STEERFUSE_HAVE_PNG
#include <png.h>
#endif

namespace steerfuse::vbp {

using nn::Tensor;

nn::Tensor<float> channel_mean(const Tensor<float>& a)
{
    std::size_t c, h, w;
    if (a.rank() == 4 && a.dim(0) == 1) {
        c = a.dim(1), h = a.dim(2), w = a.dim(3);
    } else if (a.rank() == 3) {
        c = a.dim(0), h = a.dim(1), w = a.dim(2);
    } else {
        throw nn::ShapeError("channel_mean expects C x H x W or 1 x C x H x W, got " + nn::to_string(a.shape()));
    }
    Tensor<float> out({h, w});
    const std::size_t plane = h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
            out[i] += a[ch * plane + i];
        }
    }
    const float inv = 1.0f / float(c);
    for (float& v : out.data()) {
        v *= inv;
    }
    return out;
}

nn::Tensor<float> upsample(const Tensor<float>& map, const arch::ConvLayerGeometry& l, std::size_t out_h,
                           std::size_t out_w)
{
    const std::size_t h = map.dim(0), w = map.dim(1);
    if ((h - 1) * l.stride_h + l.kernel_h > out_h || (w - 1) * l.stride_w + l.kernel_w > out_w) {
        throw nn::ShapeError("upsample target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                             " is smaller than the transposed footprint");
    }
    Tensor<float> out({out_h, out_w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const float v = map[i * w + j];
            if (v == 0.0f) {
                continue;
            }
            for (std::size_t ki = 0; ki < l.kernel_h; ++ki) {
                float* row = &out[(i * l.stride_h + ki) * out_w + j * l.stride_w];
                for (std::size_t kj = 0; kj < l.kernel_w; ++kj) {
                    row[kj] += v;
                }
            }
        }
    }
    return out;
}

nn::Tensor<float> chain(std::span<const Tensor<float>> activations, const arch::BlockGeometry& block)
{
    if (activations.empty() || activations.size() != block.layers.size()) {
        throw std::invalid_argument("visual backprop needs one activation per conv layer");
    }
    Tensor<float> v = channel_mean(activations.back());
    for (std::size_t k = activations.size() - 1; k > 0; --k) {
        const Tensor<float> below = channel_mean(activations[k - 1]);
        v = upsample(v, block.layers[k], below.dim(0), below.dim(1));
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] *= below[i];
        }
    }
    return upsample(v, block.layers.front(), block.in_h, block.in_w);
}

SaliencyMask visual_backprop(arch::Network<float>& net, const Tensor<float>* camera, const Tensor<float>* lidar,
                             arch::Modality modality)
{
    if (!arch::uses(net.variant(), modality)) {
        throw std::invalid_argument("the " + std::string(arch::to_string(net.variant())) + " model has no " +
                                    std::string(arch::to_string(modality)) + " input");
    }
    const Tensor<float>* in = modality == arch::Modality::camera ? camera : lidar;
    if (in && in->rank() == 4 && in->dim(0) != 1) {
        throw nn::ShapeError("visual backprop takes a single sample");
    }
    net.forward({camera, lidar});
    const arch::ConvBlock<float>* block = net.steering_block(modality);
    std::vector<Tensor<float>> acts = block->activations();
    // Start from what actually enters the head (gated for cgdual).
    acts.back() = *net.block_output(modality);
    return {modality, chain(acts, block->geometry())};
}

nn::Tensor<float> log_scale(const Tensor<float>& mask, double eps)
{
    Tensor<float> out(mask.shape());
    double peak = 0.0;
    std::vector<double> tmp(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!(mask[i] >= 0.0f)) {
            throw std::invalid_argument("log_scale expects a non-negative mask");
        }
        tmp[i] = std::log1p(double(mask[i]) / eps);
        peak = std::max(peak, tmp[i]);
    }
    if (peak > 0.0) {
        for (std::size_t i = 0; i < mask.size(); ++i) {
            out[i] = static_cast<float>(tmp[i] / peak);
        }
    }
    return out;
}

namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

} // namespace

RgbImage overlay_camera(const Tensor<float>& display, const Tensor<float>& yuv, std::array<float, 3> color,
                        float max_alpha)
{
    const std::size_t h = yuv.dim(yuv.rank() - 2), w = yuv.dim(yuv.rank() - 1);
    if (display.shape() != nn::Shape{h, w}) {
        throw nn::ShapeError("mask " + nn::to_string(display.shape()) + " does not match image " +
                             nn::to_string(yuv.shape()));
    }
    RgbImage out{h, w, std::vector<unsigned char>(3 * h * w)};
    const std::size_t plane = h * w;
    for (std::size_t i = 0; i < plane; ++i) {
        const auto rgb = augment::yuv_to_rgb({yuv[i], yuv[plane + i], yuv[2 * plane + i]});
        const double a = double(max_alpha) * std::clamp(double(display[i]), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) {
            out.pixels[3 * i + c] = to_byte((1.0 - a) * double(rgb[c]) + a * double(color[c]));
        }
    }
    return out;
}

RgbImage overlay_lidar(const Tensor<float>& display, const Tensor<float>& range, std::array<float, 3> color,
                       float max_alpha)
{
    const std::size_t h = range.dim(range.rank() - 2), w = range.dim(range.rank() - 1);
    if (display.shape() != nn::Shape{h, w}) {
        throw nn::ShapeError("mask " + nn::to_string(display.shape()) + " does not match range image " +
                             nn::to_string(range.shape()));
    }
    const std::size_t plane = h * w;
    float zmin = 0.0f, zmax = 0.0f;
    bool any = false;
    for (std::size_t i = 0; i < plane; ++i) {
        const bool occupied = range[i] != 0.0f || range[plane + i] != 0.0f || range[2 * plane + i] != 0.0f;
        if (occupied) {
            const float z = range[2 * plane + i];
            zmin = any ? std::min(zmin, z) : z;
            zmax = any ? std::max(zmax, z) : z;
            any = true;
        }
    }
    RgbImage out{2 * h, w, std::vector<unsigned char>(3 * 2 * plane)};
    for (std::size_t i = 0; i < plane; ++i) {
        const double a = double(max_alpha) * std::clamp(double(display[i]), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) {
            out.pixels[3 * i + c] = to_byte(a * double(color[c]));
        }
        const bool occupied = range[i] != 0.0f || range[plane + i] != 0.0f || range[2 * plane + i] != 0.0f;
        const double g = occupied && zmax > zmin ? 0.15 + 0.85 * (range[2 * plane + i] - zmin) / (zmax - zmin)
                                                 : (occupied ? 0.5 : 0.0);
        for (int c = 0; c < 3; ++c) {
            out.pixels[3 * (plane + i) + c] = to_byte(g);
        }
    }
    return out;
}

RgbImage gray(const Tensor<float>& map)
{
    const std::size_t h = map.dim(0), w = map.dim(1);
    RgbImage out{h, w, std::vector<unsigned char>(3 * h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
        const unsigned char b = to_byte(map[i]);
        out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = b;
    }
    return out;
}

bool png_supported()
{
#ifdef STEERFUSE_HAVE_PNG
    return true;
#else
    return false;
#endif
}

std::filesystem::path write_image(const std::filesystem::path& requested, const RgbImage& img)
{
    if (img.pixels.size() != 3 * img.rows * img.cols || img.rows == 0 || img.cols == 0) {
        throw std::invalid_argument("malformed image buffer");
    }
#ifdef STEERFUSE_HAVE_PNG
    const std::filesystem::path path = requested;
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) {
        throw std::runtime_error("cannot write " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(img.cols), png_uint_32(img.rows), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // Fixed header: no timestamps, so files are reproducible.
    png_write_info(png, info);
    for (std::size_t r = 0; r < img.rows; ++r) {
        png_write_row(png, img.pixels.data() + 3 * img.cols * r);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fclose(fp) != 0) {
        throw std::runtime_error("cannot write " + path.string());
    }
    return path;
#else
    std::filesystem::path path = requested;
    path.replace_extension(".ppm");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) {
        throw std::runtime_error("cannot write " + path.string());
    }
    std::fprintf(fp, "P6\n%zu %zu\n255\n", img.cols, img.rows);
    const bool ok = std::fwrite(img.pixels.data(), 1, img.pixels.size(), fp) == img.pixels.size();
    if (std::fclose(fp) != 0 || !ok) {
        throw std::runtime_error("cannot write " + path.string());
    }
    return path;
#endif
}

} // namespace steerfuse::vbp
