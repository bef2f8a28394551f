#include "steerfuse/augment/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

namespace steerfuse::augment {

using lidar::RangeGeometry;
using lidar::RangeImage;

void PoseOffset::validate() const
{
    if (!std::isfinite(lateral) || !std::isfinite(vertical) || !std::isfinite(yaw)) {
        throw std::invalid_argument("pose offset must be finite");
    }
    if (std::abs(lateral) > 1.0) {
        throw std::invalid_argument("pose offset lateral " + std::to_string(lateral) + " m exceeds 1.0 m");
    }
}

double correct_steering(double theta, double d, double w)
{
    return theta - w * d;
}

GainUnit parse_gain_unit(std::string_view s)
{
    if (s == "rad_per_m") {
        return GainUnit::rad_per_m;
    }
    if (s == "deg_per_m") {
        return GainUnit::deg_per_m;
    }
    throw std::invalid_argument("unknown steering gain unit '" + std::string(s) + "' (rad_per_m or deg_per_m)");
}

std::string_view to_string(GainUnit u)
{
    return u == GainUnit::rad_per_m ? "rad_per_m" : "deg_per_m";
}

double gain_deg_per_m(double w, GainUnit unit)
{
    return unit == GainUnit::rad_per_m ? w * 180.0 / std::numbers::pi : w;
}

// ---------------------------------------------------------------------------
// Lidar resampling

namespace {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 cross(Vec3 a, Vec3 b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
double norm(Vec3 a) { return std::sqrt(dot(a, a)); }

struct Sample {
    double azimuth;
    double range;
    Vec3 p;
    float reflectance;
    bool zero;
};

struct Interpolated {
    bool valid = false;
    Vec3 p;
    float reflectance = 0.0f;
    // Two same-surface points of this ring around the cell, for the local surface fit.
    std::optional<std::pair<Vec3, Vec3>> support;
};

Vec3 direction(const RangeGeometry& g, std::size_t row, std::size_t col)
{
    const double az = g.column_azimuth_deg(col) * std::numbers::pi / 180.0;
    const double el = g.row_elevation_deg(row) * std::numbers::pi / 180.0;
    return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

std::vector<Sample> ring_samples(const RangeImage& img, std::size_t row, const PoseOffset& off)
{
    const double cy = std::cos(-off.yaw), sy = std::sin(-off.yaw);
    std::vector<Sample> out;
    out.reserve(img.cols());
    for (std::size_t c = 0; c < img.cols(); ++c) {
        if (!img.occupied(row, c)) {
            out.push_back({img.geometry.column_azimuth_deg(c), 0.0, {}, 0.0f, true});
            continue;
        }
        const Vec3 t{double(img.at(0, row, c)), double(img.at(1, row, c)) - off.lateral,
                     double(img.at(2, row, c)) - off.vertical};
        const Vec3 p{cy * t.x - sy * t.y, sy * t.x + cy * t.y, t.z};
        out.push_back({lidar::azimuth_deg(p.x, p.y), norm(p), p, img.at(3, row, c), false});
    }
    // Left to right, i.e. decreasing azimuth.
    std::stable_sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.azimuth > b.azimuth; });
    return out;
}

std::optional<std::pair<Vec3, Vec3>> neighbor_support(const std::vector<Sample>& s, std::size_t i, double gap)
{
    for (std::size_t j : {i + 1, i - 1}) {
        if (j < s.size() && !s[j].zero && std::abs(s[j].range - s[i].range) <= gap) {
            return std::pair{s[i].p, s[j].p};
        }
    }
    return std::nullopt;
}

Interpolated interpolate_cell(const std::vector<Sample>& s, double az, double step, double gap)
{
    // First sample strictly to the right of the cell center.
    const auto it = std::partition_point(s.begin(), s.end(), [&](const Sample& x) { return x.azimuth >= az; });
    const std::size_t r = static_cast<std::size_t>(it - s.begin());
    const bool has_left = r > 0;
    const bool has_right = r < s.size();
    Interpolated out;
    auto single = [&](std::size_t i) {
        if (s[i].zero) {
            return;
        }
        out.valid = true;
        out.p = s[i].p;
        out.reflectance = s[i].reflectance;
        out.support = neighbor_support(s, i, gap);
    };
    if (!has_left && !has_right) {
        return out;
    }
    if (!has_left || !has_right) {
        const std::size_t i = has_left ? r - 1 : r;
        if (std::abs(s[i].azimuth - az) <= step) {
            single(i);
        }
        return out;
    }
    const Sample& L = s[r - 1];
    const Sample& R = s[r];
    const bool left_nearest = (L.azimuth - az) <= (az - R.azimuth);
    const std::size_t nearest = left_nearest ? r - 1 : r;
    if (s[nearest].zero) {
        return out;
    }
    if (L.zero || R.zero || std::abs(L.range - R.range) > gap) {
        single(nearest);
        return out;
    }
    const double span = L.azimuth - R.azimuth;
    const double f = span > 0.0 ? (L.azimuth - az) / span : 0.0;
    out.valid = true;
    out.p = L.p + f * (R.p - L.p);
    out.reflectance = s[nearest].reflectance;
    out.support = std::pair{L.p, R.p};
    return out;
}

} // namespace

RangeImage augment_lidar(const RangeImage& image, const PoseOffset& offset, double gap_threshold)
{
    offset.validate();
    const RangeGeometry& g = image.geometry;
    const double step = g.azimuth_step_deg();
    // Near the field-of-view edge the adjacent ring may have lost the same column.
    const std::size_t max_column_search = 16;
    std::vector<Interpolated> cells(g.rows * g.cols);
    for (std::size_t r = 0; r < g.rows; ++r) {
        const std::vector<Sample> samples = ring_samples(image, r, offset);
        for (std::size_t c = 0; c < g.cols; ++c) {
            cells[r * g.cols + c] = interpolate_cell(samples, g.column_azimuth_deg(c), step, gap_threshold);
        }
    }

    RangeImage out(g);
    for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t c = 0; c < g.cols; ++c) {
            const Interpolated& cell = cells[r * g.cols + c];
            if (!cell.valid) {
                continue;
            }
            const Vec3 d = direction(g, r, c);
            double t = norm(cell.p);
            // Neighbouring ring at the same azimuth gives the surface's extent
            // across elevation; with the in-ring support pair it spans a plane.
            // Ring spacing on flat ground grows with range, so the cross-ring
            // tolerance does too.
            const double ring_tolerance = std::max(gap_threshold, 0.5 * t);
            const Interpolated* adjacent = nullptr;
            for (std::size_t dc = 0; dc <= max_column_search && !adjacent; ++dc) {
                for (std::size_t r2 : {r + 1, r - 1}) {
                    for (std::size_t c2 : {c + dc, c - dc}) {
                        if (adjacent || r2 >= g.rows || c2 >= g.cols) {
                            continue;
                        }
                        const Interpolated& q = cells[r2 * g.cols + c2];
                        if (q.valid && norm(q.p - cell.p) <= ring_tolerance) {
                            adjacent = &q;
                        }
                    }
                }
            }
            if (adjacent && cell.support) {
                const auto [a, b] = *cell.support;
                const Vec3 q = adjacent->p;
                const Vec3 n = cross(b - a, q - a);
                const double nn = norm(n);
                const double denom = dot(n, d);
                if (nn > 1e-12 * norm(b - a) * norm(q - a) && std::abs(denom) > 1e-3 * nn) {
                    const double ti = dot(n, a) / denom;
                    if (ti > 0.0 && norm(ti * d - cell.p) <= gap_threshold) {
                        t = ti;
                    }
                }
            }
            out.at(0, r, c) = static_cast<float>(t * d.x);
            out.at(1, r, c) = static_cast<float>(t * d.y);
            out.at(2, r, c) = static_cast<float>(t * d.z);
            out.at(3, r, c) = cell.reflectance;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Photometric jitter

std::array<float, 3> yuv_to_rgb(std::array<float, 3> yuv)
{
    // Exact inverse of rgb_to_yuv.
    const double y = yuv[0], u = yuv[1], v = yuv[2];
    const double r = y + v / 0.877;
    const double b = y + u / 0.492;
    const double g = (y - 0.299 * r - 0.114 * b) / 0.587;
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

std::array<float, 3> rgb_to_yuv(std::array<float, 3> rgb)
{
    const double r = rgb[0], g = rgb[1], b = rgb[2];
    const double y = 0.299 * r + 0.587 * g + 0.114 * b;
    return {static_cast<float>(y), static_cast<float>(0.492 * (b - y)), static_cast<float>(0.877 * (r - y))};
}

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

} // namespace

std::array<float, 3> transform_rgb(std::array<float, 3> rgb, const ColorTransform& t)
{
    double c[3] = {rgb[0], rgb[1], rgb[2]};
    if (t.hue_deg != 0.0) {
        const double a = t.hue_deg * std::numbers::pi / 180.0;
        const double cs = std::cos(a), k = (1.0 - cs) / 3.0, sn = std::sqrt(1.0 / 3.0) * std::sin(a);
        const double m[3][3] = {{cs + k, k - sn, k + sn}, {k + sn, cs + k, k - sn}, {k - sn, k + sn, cs + k}};
        double o[3];
        for (int i = 0; i < 3; ++i) {
            o[i] = clamp01(m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2]);
        }
        std::copy(o, o + 3, c);
    }
    if (t.gamma != 1.0) {
        for (double& v : c) {
            v = std::pow(clamp01(v), t.gamma);
        }
    }
    if (t.saturation != 1.0) {
        const double y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        for (double& v : c) {
            v = clamp01(y + t.saturation * (v - y));
        }
    }
    return {static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2])};
}

namespace {

template <typename F>
nn::Tensor<float> map_pixels(const nn::Tensor<float>& yuv, F&& f)
{
    if (yuv.rank() != 3 || yuv.dim(0) != 3) {
        throw nn::ShapeError("expected a 3 x H x W YUV image, got " + nn::to_string(yuv.shape()));
    }
    const std::size_t plane = yuv.dim(1) * yuv.dim(2);
    nn::Tensor<float> out(yuv.shape());
    for (std::size_t i = 0; i < plane; ++i) {
        const auto o = f(std::array<float, 3>{yuv[i], yuv[plane + i], yuv[2 * plane + i]});
        out[i] = o[0];
        out[plane + i] = o[1];
        out[2 * plane + i] = o[2];
    }
    return out;
}

} // namespace

nn::Tensor<float> apply_color_transform(const nn::Tensor<float>& yuv, const ColorTransform& t)
{
    return map_pixels(yuv, [&](std::array<float, 3> p) { return rgb_to_yuv(transform_rgb(yuv_to_rgb(p), t)); });
}

nn::Tensor<float> overexpose(const nn::Tensor<float>& yuv, double factor)
{
    return map_pixels(yuv, [&](std::array<float, 3> p) {
        auto rgb = yuv_to_rgb(p);
        for (float& v : rgb) {
            v = static_cast<float>(std::isinf(factor) ? 1.0 : clamp01(double(v) * factor));
        }
        return rgb_to_yuv(rgb);
    });
}

void JitterConfig::validate() const
{
    auto positive_range = [](const std::array<double, 2>& r, const char* name) {
        if (!(r[0] > 0.0) || !(r[1] >= r[0])) {
            throw std::invalid_argument(std::string("jitter ") + name + " range must be positive and ordered");
        }
    };
    positive_range(gamma, "gamma");
    positive_range(saturation, "saturation");
    positive_range(reflectance, "reflectance");
    if (!(hue_deg >= 0.0)) {
        throw std::invalid_argument("jitter hue range must be non-negative");
    }
}

ColorTransform sample_color_transform(const JitterConfig& cfg, Rng& rng)
{
    ColorTransform t;
    t.hue_deg = rng.uniform(-cfg.hue_deg, cfg.hue_deg);
    t.gamma = rng.uniform(cfg.gamma[0], cfg.gamma[1]);
    t.saturation = rng.uniform(cfg.saturation[0], cfg.saturation[1]);
    return t;
}

nn::Tensor<float> jitter_camera(const nn::Tensor<float>& yuv, const JitterConfig& cfg, Rng& rng)
{
    cfg.validate();
    return apply_color_transform(yuv, sample_color_transform(cfg, rng));
}

RangeImage scale_reflectance_rows(const RangeImage& image, std::span<const double> factors)
{
    if (factors.size() != image.rows()) {
        throw std::invalid_argument("one reflectance factor per row required");
    }
    RangeImage out = image;
    for (std::size_t r = 0; r < image.rows(); ++r) {
        if (factors[r] == 1.0) {
            continue;
        }
        for (std::size_t c = 0; c < image.cols(); ++c) {
            float& v = out.at(3, r, c);
            v = static_cast<float>(double(v) * factors[r]);
        }
    }
    return out;
}

RangeImage jitter_reflectance_rows(const RangeImage& image, const JitterConfig& cfg, Rng& rng)
{
    cfg.validate();
    std::vector<double> f(image.rows());
    for (double& v : f) {
        v = rng.uniform(cfg.reflectance[0], cfg.reflectance[1]);
    }
    return scale_reflectance_rows(image, f);
}

} // namespace steerfuse::augment
