#include "steerfuse/lidar/range_image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace steerfuse::lidar {

namespace {

constexpr double rad_to_deg = 180.0 / std::numbers::pi;

struct Cell {
    std::size_t row;
    std::size_t col;
};

std::optional<Cell> cell_of(const RangeGeometry& g, double x, double y, double z)
{
    const auto row = g.row_of(elevation_deg(x, y, z));
    const auto col = g.column_of(azimuth_deg(x, y));
    if (!row || !col) {
        return std::nullopt;
    }
    return Cell{*row, *col};
}

} // namespace

std::optional<std::size_t> RangeGeometry::row_of(double elevation) const
{
    const double u = (elevation_top_deg - elevation) / elevation_step_deg() + 0.5;
    if (!(u >= 0.0) || u >= double(rows)) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(u);
}

std::optional<std::size_t> RangeGeometry::column_of(double azimuth) const
{
    if (!(azimuth >= -azimuth_half_fov_deg && azimuth <= azimuth_half_fov_deg)) {
        return std::nullopt;
    }
    const double u = (azimuth_half_fov_deg - azimuth) / (2.0 * azimuth_half_fov_deg) * double(cols);
    return std::min(static_cast<std::size_t>(u), cols - 1);
}

double elevation_deg(double x, double y, double z)
{
    return std::atan2(z, std::hypot(x, y)) * rad_to_deg;
}

double azimuth_deg(double x, double y)
{
    return std::atan2(y, x) * rad_to_deg;
}

double RangeImage::range(std::size_t row, std::size_t col) const
{
    const double x = at(0, row, col), y = at(1, row, col), z = at(2, row, col);
    return std::sqrt(x * x + y * y + z * z);
}

std::size_t RangeImage::occupied_count() const
{
    std::size_t n = 0;
    for (std::size_t r = 0; r < rows(); ++r) {
        for (std::size_t c = 0; c < cols(); ++c) {
            n += occupied(r, c) ? 1 : 0;
        }
    }
    return n;
}

void ReflectanceModel::validate(std::size_t rows) const
{
    if (scales.size() != rows) {
        throw std::invalid_argument("reflectance model has " + std::to_string(scales.size()) + " scales for " +
                                    std::to_string(rows) + " rows");
    }
    for (double s : scales) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw std::invalid_argument("reflectance scales must be positive and finite");
        }
    }
}

Projection project(const LidarScan& scan, const ReflectanceModel& model, const RangeGeometry& geometry)
{
    model.validate(geometry.rows);
    Projection out{RangeImage(geometry), 0};
    RangeImage& img = out.image;
    std::vector<double> best(geometry.rows * geometry.cols, std::numeric_limits<double>::infinity());
    for (const LidarPoint& p : scan.points) {
        const float xf = static_cast<float>(p.x), yf = static_cast<float>(p.y), zf = static_cast<float>(p.z);
        const double x = xf, y = yf, z = zf;
        const double r = std::sqrt(x * x + y * y + z * z);
        if (!(r > 0.0)) {
            ++out.dropped;
            continue;
        }
        const auto cell = cell_of(geometry, x, y, z);
        if (!cell) {
            ++out.dropped;
            continue;
        }
        double& b = best[cell->row * geometry.cols + cell->col];
        if (r < b) {
            b = r;
            img.at(0, cell->row, cell->col) = xf;
            img.at(1, cell->row, cell->col) = yf;
            img.at(2, cell->row, cell->col) = zf;
            img.at(3, cell->row, cell->col) = static_cast<float>(p.reflectance / model.scales[cell->row]);
        }
    }
    return out;
}

LidarScan unproject(const RangeImage& image, const ReflectanceModel& model)
{
    model.validate(image.rows());
    LidarScan scan;
    for (std::size_t r = 0; r < image.rows(); ++r) {
        for (std::size_t c = 0; c < image.cols(); ++c) {
            if (!image.occupied(r, c)) {
                continue;
            }
            LidarPoint p;
            p.x = image.at(0, r, c);
            p.y = image.at(1, r, c);
            p.z = image.at(2, r, c);
            p.reflectance = double(image.at(3, r, c)) * model.scales[r];
            scan.points.push_back(p);
        }
    }
    return scan;
}

bool bins_consistent(const RangeImage& image)
{
    for (std::size_t r = 0; r < image.rows(); ++r) {
        for (std::size_t c = 0; c < image.cols(); ++c) {
            if (!image.occupied(r, c)) {
                if (image.at(3, r, c) != 0.0f) {
                    return false;
                }
                continue;
            }
            const auto cell = cell_of(image.geometry, image.at(0, r, c), image.at(1, r, c), image.at(2, r, c));
            if (!cell || cell->row != r || cell->col != c) {
                return false;
            }
        }
    }
    return true;
}

ReflectanceModel fit_reflectance_model(std::span<const LidarScan> scans, std::span<const std::vector<bool>> road_masks,
                                       const RangeGeometry& geometry)
{
    if (scans.size() != road_masks.size()) {
        throw std::invalid_argument("fit_reflectance_model: one road mask per scan required");
    }
    std::vector<double> sum(geometry.rows, 0.0);
    std::vector<std::size_t> count(geometry.rows, 0);
    for (std::size_t i = 0; i < scans.size(); ++i) {
        const auto& points = scans[i].points;
        if (road_masks[i].size() != points.size()) {
            throw std::invalid_argument("fit_reflectance_model: road mask length does not match scan " +
                                        std::to_string(i));
        }
        for (std::size_t j = 0; j < points.size(); ++j) {
            if (!road_masks[i][j]) {
                continue;
            }
            const LidarPoint& p = points[j];
            const auto cell = cell_of(geometry, static_cast<float>(p.x), static_cast<float>(p.y),
                                      static_cast<float>(p.z));
            if (cell) {
                sum[cell->row] += p.reflectance;
                ++count[cell->row];
            }
        }
    }
    ReflectanceModel m;
    m.scales.resize(geometry.rows);
    for (std::size_t r = 0; r < geometry.rows; ++r) {
        if (count[r] == 0) {
            throw std::invalid_argument("fit_reflectance_model: ring " + std::to_string(r) +
                                        " has no road echoes; fitting corpus too small");
        }
        m.scales[r] = sum[r] / double(count[r]);
    }
    m.validate(geometry.rows);
    return m;
}

} // namespace steerfuse::lidar
