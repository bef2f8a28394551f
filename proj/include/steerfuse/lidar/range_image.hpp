#pragma once

#include "steerfuse/nn/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace steerfuse::lidar {

/// Angular layout of a range image. Rows are rings ordered from the highest
/// elevation down; columns are azimuth bins ordered left to right.
/// Sensor frame: x forward, y left, z up; azimuth positive to the left.
struct RangeGeometry {
    std::size_t rows = 11;
    std::size_t cols = 310;
    double elevation_top_deg = -2.7;
    double elevation_bottom_deg = -11.3;
    double azimuth_half_fov_deg = 34.4;

    static RangeGeometry full() { return {}; }
    static RangeGeometry with_columns(std::size_t cols)
    {
        RangeGeometry g;
        g.cols = cols;
        return g;
    }

    double elevation_step_deg() const { return (elevation_top_deg - elevation_bottom_deg) / double(rows - 1); }
    double azimuth_step_deg() const { return 2.0 * azimuth_half_fov_deg / double(cols); }
    double row_elevation_deg(std::size_t row) const { return elevation_top_deg - double(row) * elevation_step_deg(); }
    double column_azimuth_deg(std::size_t col) const
    {
        return azimuth_half_fov_deg - (double(col) + 0.5) * azimuth_step_deg();
    }

    /// Row by nearest elevation center, or nullopt outside the vertical FOV.
    std::optional<std::size_t> row_of(double elevation_deg) const;
    /// Column bin, or nullopt outside the horizontal FOV.
    std::optional<std::size_t> column_of(double azimuth_deg) const;

    bool operator==(const RangeGeometry&) const = default;
};

struct LidarPoint {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double reflectance = 0.0; // raw, non-negative
    int ring = -1;            // physical ring id when known
};

struct LidarScan {
    std::vector<LidarPoint> points;
    double timestamp = 0.0;
};

/// 4 x rows x cols, channels (x, y, z, normalized reflectance). Cells without
/// an echo are zero in all four channels.
struct RangeImage {
    RangeGeometry geometry;
    nn::Tensor<float> data;

    RangeImage() : RangeImage(RangeGeometry{}) {}
    explicit RangeImage(RangeGeometry g) : geometry(g), data({4, g.rows, g.cols}) {}

    std::size_t rows() const { return geometry.rows; }
    std::size_t cols() const { return geometry.cols; }
    std::size_t plane() const { return geometry.rows * geometry.cols; }

    float& at(std::size_t channel, std::size_t row, std::size_t col)
    {
        return data[(channel * geometry.rows + row) * geometry.cols + col];
    }
    float at(std::size_t channel, std::size_t row, std::size_t col) const
    {
        return data[(channel * geometry.rows + row) * geometry.cols + col];
    }

    bool occupied(std::size_t row, std::size_t col) const
    {
        return at(0, row, col) != 0.0f || at(1, row, col) != 0.0f || at(2, row, col) != 0.0f;
    }
    double range(std::size_t row, std::size_t col) const;
    std::size_t occupied_count() const;

    bool operator==(const RangeImage&) const = default;
};

/// Per-row reflectance scale: raw reflectance / scale = normalized value.
struct ReflectanceModel {
    std::vector<double> scales;

    static ReflectanceModel identity(std::size_t rows = 11) { return {std::vector<double>(rows, 1.0)}; }
    void validate(std::size_t rows) const;
    bool operator==(const ReflectanceModel&) const = default;
};

double elevation_deg(double x, double y, double z);
double azimuth_deg(double x, double y);

struct Projection {
    RangeImage image;
    std::size_t dropped = 0; // points outside the field of view
};

/// Bins each point into its (ring, azimuth) cell. When several points share a
/// cell the closer one is kept; exact range ties keep the first point seen.
/// Coordinates are rounded to float before binning so stored cells always
/// contain their own point.
Projection project(const LidarScan& scan, const ReflectanceModel& model, const RangeGeometry& geometry = {});

/// One point per occupied cell, with reflectance multiplied back by the row scale.
LidarScan unproject(const RangeImage& image, const ReflectanceModel& model);

/// True when every occupied cell's point falls inside that cell's angular bin.
bool bins_consistent(const RangeImage& image);

/// scale[r] = mean raw reflectance of road echoes landing in row r.
/// road_masks[i][j] marks point j of scans[i] as a road echo.
ReflectanceModel fit_reflectance_model(std::span<const LidarScan> scans,
                                       std::span<const std::vector<bool>> road_masks,
                                       const RangeGeometry& geometry = {});

} // namespace steerfuse::lidar
