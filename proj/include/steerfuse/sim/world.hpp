#pragma once

#include "steerfuse/augment/augment.hpp"
#include "steerfuse/lidar/range_image.hpp"
#include "steerfuse/nn/tensor.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace steerfuse::sim {

enum class Surface { asphalt_lines, asphalt_no_lines, gravel, snow };
std::string_view to_string(Surface s);
Surface parse_surface(std::string_view s);
int surface_code(Surface s);

class TrackInfeasible : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class CurvatureKind { sinusoid, straight, arc };
CurvatureKind parse_curvature_kind(std::string_view s);
std::string_view to_string(CurvatureKind k);

struct TrackConfig {
    double length = 1000.0;        // m
    double lane_width = 3.5;       // m
    double shoulder = 0.75;        // m beyond each lane line
    CurvatureKind kind = CurvatureKind::sinusoid;
    double max_curvature = 1.0 / 150.0; // 1/m
    double arc_radius = 200.0;     // m, signed, positive turns left (kind = arc)
    int components = 3;
    double min_wavelength = 250.0; // m
    double max_wavelength = 900.0; // m
    Surface surface = Surface::asphalt_lines;
    bool flat_terrain = false;     // no ditches, banks or posts
    double post_spacing = 35.0;    // m along the road, both sides
    double post_offset = 4.0;      // m beyond the shoulder edge
    double sample_spacing = 0.5;   // m

    void validate() const;
    bool operator==(const TrackConfig&) const = default;
};

struct Post {
    double x;
    double y;
    double s;
    bool operator==(const Post&) const = default;
};

/// Open road along a smooth centerline sampled every sample_spacing meters.
struct Track {
    TrackConfig config;
    std::uint64_t seed = 0;
    std::vector<double> s;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> heading;
    std::vector<double> curvature;
    std::vector<Post> posts;

    double lane_half() const { return 0.5 * config.lane_width; }
    double road_half() const { return lane_half() + config.shoulder; }
    double length() const { return s.back(); }
    bool operator==(const Track&) const = default;
};

/// Curvature is a bounded sum of sinusoids (sinusoid), zero (straight) or
/// constant (arc). Deterministic in (config, seed).
Track generate_track(const TrackConfig& config, std::uint64_t seed);

struct TrackPoint {
    std::size_t index = 0; // sample at or before the foot point
    double s = 0.0;
    double lateral = 0.0;       // signed distance to the centerline, left positive
    double heading_error = 0.0; // vehicle heading minus track heading, wrapped to (-pi, pi]
};

/// Foot point of (x, y) on the centerline, searching near `hint`.
TrackPoint locate(const Track& track, double x, double y, double heading, std::size_t hint);
TrackPoint locate(const Track& track, double x, double y, double heading);

/// Centerline pose at arclength s.
struct CenterPose {
    double x, y, heading;
};
CenterPose centerline_at(const Track& track, double s);

/// Terrain height at signed lateral distance d from the centerline.
double terrain_height(const TrackConfig& config, double d);

// ---------------------------------------------------------------------------

struct VehicleParams {
    double wheelbase = 2.85;     // m
    double steering_ratio = 16.0;
    double max_wheel_deg = 540.0;
};

/// Rear-axle reference point, heading in radians, steering wheel in degrees
/// (positive = left).
struct VehicleState {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;
    double speed = 0.0;
    double steering_wheel_deg = 0.0;
    bool operator==(const VehicleState&) const = default;
};

/// Kinematic bicycle step with exact arc integration; `yaw_disturbance` is an
/// additional yaw rate in rad/s. Speed is preserved.
VehicleState step_vehicle(const VehicleState& state, const VehicleParams& params, double dt,
                          double yaw_disturbance = 0.0);

/// Steady-state wheel angle (deg) for a circle of radius R (positive = left).
double steady_state_wheel_deg(const VehicleParams& params, double radius);

// ---------------------------------------------------------------------------

/// Sensor pose in the world: rear-axle position plus a rig offset.
struct SensorPose {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;
    augment::PoseOffset offset;
};

struct CameraConfig {
    std::size_t rows = 63;
    std::size_t cols = 306;
    double height = 1.6;            // m above the road
    double horizontal_fov_deg = 70.0;
    double horizon_offset_rows = 2.0; // first row lies this far below the horizon
    double pixel_noise = 0.01;
    double texture_noise = 0.08;
};

struct LidarConfig {
    lidar::RangeGeometry geometry;
    double height = 2.0; // m above the road
    double dropout = 0.01;
    double max_range = 100.0;
    double reflectance_noise = 0.05;
    std::uint64_t sensor_seed = 1; // fixes per-ring intensity gains
};

struct Weather {
    double exposure = 1.0;
};

/// 3 x rows x cols YUV image of the ground below the horizon.
nn::Tensor<float> render_camera(const Track& track, const SensorPose& pose, const CameraConfig& cam,
                                const Weather& weather, std::uint64_t seed);

enum class PixelClass : unsigned char { road, lane_line, shoulder, offroad };

/// Ground class under each camera pixel, row-major. A pixel is a lane line
/// when paint covers at least half of its footprint and off-road when the
/// footprint lies entirely beyond the shoulders.
std::vector<PixelClass> camera_pixel_classes(const Track& track, const SensorPose& pose, const CameraConfig& cam);

struct LidarRender {
    lidar::LidarScan scan;
    std::vector<bool> road; // per point: echo from the paved/gravel road body
};

/// One ray per range-image cell center from the sensor height against the
/// terrain and roadside posts.
LidarRender render_lidar(const Track& track, const SensorPose& pose, const LidarConfig& lidar, std::uint64_t seed);

} // namespace steerfuse::sim
