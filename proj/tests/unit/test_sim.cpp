#include "doctest.h"

#include "steerfuse/sim/world.hpp"
#include "steerfuse/lidar/range_image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

using namespace steerfuse;
using namespace steerfuse::sim;

namespace {

constexpr double deg = std::numbers::pi / 180.0;

TrackConfig straight_config(Surface surface = Surface::asphalt_lines)
{
    TrackConfig c;
    c.kind = CurvatureKind::straight;
    c.surface = surface;
    return c;
}

/// Columns in a camera row whose luma exceeds the threshold.
std::vector<std::size_t> bright_columns(const nn::Tensor<float>& img, std::size_t cols, std::size_t row, float thr)
{
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < cols; ++j) {
        if (img[row * cols + j] > thr) {
            out.push_back(j);
        }
    }
    return out;
}

/// Luma-weighted centroid of the brightest blob on each half of a row.
std::pair<double, double> line_centroids(const nn::Tensor<float>& img, std::size_t cols, std::size_t row)
{
    double lw = 0, lc = 0, rw = 0, rc = 0;
    for (std::size_t j = 0; j < cols; ++j) {
        const double v = std::max(0.0, double(img[row * cols + j]) - 0.45);
        if (double(j) + 0.5 < 0.5 * double(cols)) {
            lw += v;
            lc += v * (double(j) + 0.5);
        } else {
            rw += v;
            rc += v * (double(j) + 0.5);
        }
    }
    return {lc / lw, rc / rw};
}

} // namespace

TEST_CASE("track generation")
{
    TrackConfig cfg;
    const Track a = generate_track(cfg, 11), b = generate_track(cfg, 11), c = generate_track(cfg, 12);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    for (double k : a.curvature) {
        CHECK(std::abs(k) <= cfg.max_curvature + 1e-15);
    }
    CHECK(a.length() >= cfg.length);

    const Track s = generate_track(straight_config(), 3);
    for (std::size_t i = 0; i < s.s.size(); ++i) {
        CHECK(s.curvature[i] == 0.0);
        CHECK(s.y[i] == 0.0);
    }
    CHECK(s.x.back() == doctest::Approx(s.length()));

    TrackConfig arc = straight_config();
    arc.kind = CurvatureKind::arc;
    arc.arc_radius = 200.0;
    const Track r = generate_track(arc, 1);
    // Every sample sits on the circle centered at (0, 200).
    for (std::size_t i = 0; i < r.s.size(); i += 50) {
        CHECK(std::hypot(r.x[i], r.y[i] - 200.0) == doctest::Approx(200.0).epsilon(1e-6));
    }

    TrackConfig bad;
    bad.max_curvature = 0.5;
    CHECK_THROWS_AS(generate_track(bad, 1), TrackInfeasible);
    bad = TrackConfig{};
    bad.length = 100.0;
    CHECK_THROWS_AS(generate_track(bad, 1), TrackInfeasible);
    CHECK_THROWS_AS(parse_surface("ice"), std::invalid_argument);
    CHECK(parse_surface("snow") == Surface::snow);
}

TEST_CASE("locate on a straight road")
{
    const Track t = generate_track(straight_config(), 1);
    const TrackPoint p = locate(t, 123.4, 0.7, 0.1);
    CHECK(p.s == doctest::Approx(123.4));
    CHECK(p.lateral == doctest::Approx(0.7));
    CHECK(p.heading_error == doctest::Approx(0.1));
    CHECK(locate(t, 123.4, -1.2, 0.0, 240).lateral == doctest::Approx(-1.2));

    const CenterPose c = centerline_at(t, 50.25);
    CHECK(c.x == doctest::Approx(50.25));
    CHECK(c.heading == 0.0);
}

TEST_CASE("terrain profile")
{
    TrackConfig cfg;
    CHECK(terrain_height(cfg, 0.0) == 0.0);
    CHECK(terrain_height(cfg, 2.5) == 0.0);
    CHECK(terrain_height(cfg, 2.5 + 1.5) == doctest::Approx(-0.6));
    CHECK(terrain_height(cfg, -(2.5 + 10.0)) == doctest::Approx(0.8));
    cfg.flat_terrain = true;
    CHECK(terrain_height(cfg, 8.0) == 0.0);
}

TEST_CASE("bicycle kinematics")
{
    const VehicleParams p;
    VehicleState s;
    s.speed = 10.0;
    for (int i = 0; i < 50; ++i) {
        s = step_vehicle(s, p, 0.1);
    }
    CHECK(s.x == doctest::Approx(50.0));
    CHECK(s.y == 0.0);

    // Steady wheel for R = 50 m traces that circle.
    VehicleState c;
    c.speed = 8.0;
    c.steering_wheel_deg = steady_state_wheel_deg(p, 50.0);
    for (int i = 0; i < 137; ++i) {
        c = step_vehicle(c, p, 0.1);
        CHECK(std::hypot(c.x, c.y - 50.0) == doctest::Approx(50.0).epsilon(1e-9));
    }
    // Yaw-rate oracle: v tan(delta) / L.
    const double delta = c.steering_wheel_deg / 16.0 * deg;
    CHECK(c.heading == doctest::Approx(13.7 * 8.0 * std::tan(delta) / 2.85).epsilon(1e-9));
    CHECK(steady_state_wheel_deg(p, -50.0) == doctest::Approx(-steady_state_wheel_deg(p, 50.0)));
}

TEST_CASE("lidar over a flat road")
{
    TrackConfig cfg = straight_config();
    cfg.flat_terrain = true;
    const Track t = generate_track(cfg, 1);
    LidarConfig lc;
    lc.dropout = 0.0;
    SensorPose pose{100.0, 0.0, 0.0, {}};
    const LidarRender r = render_lidar(t, pose, lc, 4);
    const lidar::RangeGeometry& g = lc.geometry;
    CHECK(r.scan.points.size() == g.rows * g.cols);
    CHECK(r.road.size() == r.scan.points.size());

    const lidar::Projection p = lidar::project(r.scan, lidar::ReflectanceModel::identity());
    CHECK(p.dropped == 0);
    CHECK(p.image.occupied_count() == g.rows * g.cols);
    // Ring 5 points 7 deg down from 2 m.
    const double expected = 2.0 / std::sin(7.0 * deg);
    CHECK(expected == doctest::Approx(16.41).epsilon(1e-3));
    for (std::size_t c = 0; c < g.cols; c += 37) {
        CHECK(p.image.range(5, c) == doctest::Approx(expected).epsilon(1e-5));
        CHECK(p.image.at(2, 5, c) == doctest::Approx(-2.0).epsilon(1e-5));
    }

    lc.dropout = 1.0;
    CHECK(render_lidar(t, pose, lc, 4).scan.points.empty());

    lc.dropout = 0.0;
    SensorPose raised = pose;
    raised.offset.vertical = 0.08;
    const lidar::Projection q = lidar::project(render_lidar(t, raised, lc, 4).scan, lidar::ReflectanceModel::identity());
    CHECK(q.image.range(5, 20) == doctest::Approx(2.08 / std::sin(7.0 * deg)).epsilon(1e-5));
}

TEST_CASE("lidar sees roadside structure")
{
    const Track t = generate_track(straight_config(), 1);
    LidarConfig lc;
    lc.dropout = 0.0;
    const LidarRender r = render_lidar(t, {100.0, 0.0, 0.0, {}}, lc, 4);
    std::size_t raised = 0;
    for (const auto& p : r.scan.points) {
        raised += p.z > -2.0 + 0.05;
    }
    CHECK(raised > 0);
    // Road echoes all lie on the flat road body within the lanes.
    for (std::size_t i = 0; i < r.scan.points.size(); ++i) {
        if (r.road[i]) {
            CHECK(r.scan.points[i].z == doctest::Approx(-2.0).epsilon(1e-6));
            CHECK(std::abs(r.scan.points[i].y) < 1.75);
        }
    }
}

TEST_CASE("camera rendering")
{
    const Track t = generate_track(straight_config(), 1);
    CameraConfig cam;
    cam.pixel_noise = 0.0;
    cam.texture_noise = 0.0;
    const SensorPose centered{100.0, 0.0, 0.0, {}};
    const auto img = render_camera(t, centered, cam, {}, 1);
    CHECK(img.shape() == std::vector<std::size_t>{3, 63, 306});

    SUBCASE("centered lines are symmetric")
    {
        for (std::size_t row : {40u, 50u, 62u}) {
            const auto [l, r] = line_centroids(img, cam.cols, row);
            CHECK(std::abs((l + r) - double(cam.cols)) < 1.0);
        }
    }
    SUBCASE("shifting the rig left moves the lines right")
    {
        SensorPose left = centered;
        left.offset.lateral = 0.39;
        const auto shifted = render_camera(t, left, cam, {}, 1);
        for (std::size_t row : {40u, 62u}) {
            const auto [l0, r0] = line_centroids(img, cam.cols, row);
            const auto [l1, r1] = line_centroids(shifted, cam.cols, row);
            CHECK(l1 > l0);
            CHECK(r1 > r0);
            // Ground-plane oracle: column shift = f * 0.39 / X.
            const double f = 153.0 / std::tan(35.0 * deg);
            const double x = 1.6 * f / (double(row) + 0.5 + 2.0);
            CHECK(r1 - r0 == doctest::Approx(f * 0.39 / x).epsilon(0.05));
        }
    }
    SUBCASE("no lines on unmarked surfaces")
    {
        const Track u = generate_track(straight_config(Surface::asphalt_no_lines), 1);
        const auto plain = render_camera(u, centered, cam, {}, 1);
        CHECK(bright_columns(plain, cam.cols, 62, 0.6f).empty());
        CHECK_FALSE(bright_columns(img, cam.cols, 62, 0.6f).empty());
    }
    SUBCASE("infinite exposure saturates to white")
    {
        const auto white = render_camera(t, centered, cam, {std::numeric_limits<double>::infinity()}, 1);
        const std::size_t plane = cam.rows * cam.cols;
        for (std::size_t i = 0; i < plane; ++i) {
            CHECK(white[i] == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(std::abs(white[plane + i]) < 1e-6);
            CHECK(std::abs(white[2 * plane + i]) < 1e-6);
        }
    }
    SUBCASE("same seed, same image")
    {
        CameraConfig noisy;
        CHECK(render_camera(t, centered, noisy, {}, 9) == render_camera(t, centered, noisy, {}, 9));
        CHECK_FALSE(render_camera(t, centered, noisy, {}, 9) == render_camera(t, centered, noisy, {}, 10));
    }
}
