#include "steerfuse/sim/world.hpp"

#include "steerfuse/util/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

namespace steerfuse::sim {

namespace {

constexpr double pi = std::numbers::pi;
constexpr double deg = pi / 180.0;

double wrap_angle(double a)
{
    a = std::fmod(a + pi, 2.0 * pi);
    if (a <= 0.0) {
        a += 2.0 * pi;
    }
    return a - pi;
}

double smoothstep(double x)
{
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

} // namespace

std::string_view to_string(Surface s)
{
    switch (s) {
    case Surface::asphalt_lines:
        return "asphalt_lines";
    case Surface::asphalt_no_lines:
        return "asphalt_no_lines";
    case Surface::gravel:
        return "gravel";
    case Surface::snow:
        return "snow";
    }
    return "?";
}

Surface parse_surface(std::string_view s)
{
    for (Surface v : {Surface::asphalt_lines, Surface::asphalt_no_lines, Surface::gravel, Surface::snow}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw std::invalid_argument("unknown surface '" + std::string(s) +
                                "' (asphalt_lines, asphalt_no_lines, gravel or snow)");
}

int surface_code(Surface s)
{
    return static_cast<int>(s);
}

CurvatureKind parse_curvature_kind(std::string_view s)
{
    if (s == "sinusoid") {
        return CurvatureKind::sinusoid;
    }
    if (s == "straight") {
        return CurvatureKind::straight;
    }
    if (s == "arc") {
        return CurvatureKind::arc;
    }
    throw std::invalid_argument("unknown curvature kind '" + std::string(s) + "' (sinusoid, straight or arc)");
}

std::string_view to_string(CurvatureKind k)
{
    switch (k) {
    case CurvatureKind::sinusoid:
        return "sinusoid";
    case CurvatureKind::straight:
        return "straight";
    case CurvatureKind::arc:
        return "arc";
    }
    return "?";
}

void TrackConfig::validate() const
{
    if (!(length >= 500.0)) {
        throw TrackInfeasible("track length must be at least 500 m");
    }
    if (!(lane_width > 1.0) || !(shoulder >= 0.0)) {
        throw TrackInfeasible("lane width must exceed 1 m and shoulder be non-negative");
    }
    if (!(sample_spacing > 0.0) || sample_spacing > 5.0) {
        throw TrackInfeasible("sample spacing must be in (0, 5] m");
    }
    // Curvature above ~0.2 1/m needs more than 540 deg of wheel at ratio 16.
    const double bound = 0.2;
    if (kind == CurvatureKind::sinusoid) {
        if (!(max_curvature > 0.0) || max_curvature > bound) {
            throw TrackInfeasible("max_curvature must be in (0, 0.2] 1/m");
        }
        if (components < 1 || !(min_wavelength > 0.0) || !(max_wavelength >= min_wavelength)) {
            throw TrackInfeasible("sinusoid track needs components >= 1 and ordered positive wavelengths");
        }
    }
    if (kind == CurvatureKind::arc && !(std::abs(arc_radius) >= 1.0 / bound)) {
        throw TrackInfeasible("arc radius must be at least 5 m");
    }
    if (!(post_spacing > 0.0)) {
        throw TrackInfeasible("post spacing must be positive");
    }
}

Track generate_track(const TrackConfig& config, std::uint64_t seed)
{
    config.validate();
    Track t;
    t.config = config;
    t.seed = seed;
    const std::size_t n = static_cast<std::size_t>(std::ceil(config.length / config.sample_spacing)) + 1;
    t.s.resize(n);
    t.curvature.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        t.s[i] = double(i) * config.sample_spacing;
    }

    if (config.kind == CurvatureKind::arc) {
        std::fill(t.curvature.begin(), t.curvature.end(), 1.0 / config.arc_radius);
    } else if (config.kind == CurvatureKind::sinusoid) {
        Rng rng(derive_seed(seed, {0x7472}));
        std::vector<double> amp(config.components), wavelength(config.components), phase(config.components);
        double total = 0.0;
        for (int k = 0; k < config.components; ++k) {
            amp[k] = rng.uniform(0.5, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
            wavelength[k] = rng.uniform(config.min_wavelength, config.max_wavelength);
            phase[k] = rng.uniform(0.0, 2.0 * pi);
            total += std::abs(amp[k]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double k = 0.0;
            for (int c = 0; c < config.components; ++c) {
                k += amp[c] / total * config.max_curvature * std::sin(2.0 * pi * t.s[i] / wavelength[c] + phase[c]);
            }
            // Straight run-in so vehicles can start centered and aligned.
            t.curvature[i] = k * smoothstep((t.s[i] - 20.0) / 60.0);
        }
    }

    t.heading.resize(n);
    t.x.resize(n);
    t.y.resize(n);
    t.heading[0] = 0.0;
    t.x[0] = 0.0;
    t.y[0] = 0.0;
    for (std::size_t i = 1; i < n; ++i) {
        const double ds = t.s[i] - t.s[i - 1];
        t.heading[i] = t.heading[i - 1] + 0.5 * (t.curvature[i] + t.curvature[i - 1]) * ds;
        const double mid = 0.5 * (t.heading[i] + t.heading[i - 1]);
        t.x[i] = t.x[i - 1] + ds * std::cos(mid);
        t.y[i] = t.y[i - 1] + ds * std::sin(mid);
    }

    if (!config.flat_terrain) {
        const double lateral = t.road_half() + config.post_offset;
        for (double s = 0.5 * config.post_spacing; s < t.length(); s += config.post_spacing) {
            const CenterPose c = centerline_at(t, s);
            for (double side : {1.0, -1.0}) {
                t.posts.push_back({c.x - side * lateral * std::sin(c.heading), c.y + side * lateral * std::cos(c.heading), s});
            }
        }
    }
    return t;
}

CenterPose centerline_at(const Track& t, double s)
{
    s = std::clamp(s, 0.0, t.length());
    const double u = s / t.config.sample_spacing;
    const std::size_t i = std::min(static_cast<std::size_t>(u), t.s.size() - 2);
    const double f = u - double(i);
    return {t.x[i] + f * (t.x[i + 1] - t.x[i]), t.y[i] + f * (t.y[i + 1] - t.y[i]),
            t.heading[i] + f * (t.heading[i + 1] - t.heading[i])};
}

namespace {

TrackPoint foot_point(const Track& t, double x, double y, double heading, std::size_t lo, std::size_t hi)
{
    std::size_t best = lo;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = lo; i <= hi; ++i) {
        const double d = (t.x[i] - x) * (t.x[i] - x) + (t.y[i] - y) * (t.y[i] - y);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    // Project onto the segment leaving or entering the nearest sample.
    TrackPoint out;
    auto project_segment = [&](std::size_t i) -> std::optional<TrackPoint> {
        if (i + 1 >= t.s.size()) {
            return std::nullopt;
        }
        const double ex = t.x[i + 1] - t.x[i], ey = t.y[i + 1] - t.y[i];
        const double len2 = ex * ex + ey * ey;
        const double f = ((x - t.x[i]) * ex + (y - t.y[i]) * ey) / len2;
        if (f < 0.0 || f > 1.0) {
            return std::nullopt;
        }
        const double len = std::sqrt(len2);
        TrackPoint p;
        p.index = i;
        p.s = t.s[i] + f * (t.s[i + 1] - t.s[i]);
        p.lateral = (ex * (y - t.y[i]) - ey * (x - t.x[i])) / len;
        p.heading_error = wrap_angle(heading - (t.heading[i] + f * (t.heading[i + 1] - t.heading[i])));
        return p;
    };
    if (auto p = project_segment(best)) {
        return *p;
    }
    if (best > 0) {
        if (auto p = project_segment(best - 1)) {
            return *p;
        }
    }
    // Beyond either end, or exactly at a vertex between segments.
    const std::size_t i = best;
    const double c = std::cos(t.heading[i]), s = std::sin(t.heading[i]);
    out.index = std::min(i, t.s.size() - 2);
    out.s = t.s[i] + (x - t.x[i]) * c + (y - t.y[i]) * s;
    out.lateral = -(x - t.x[i]) * s + (y - t.y[i]) * c;
    out.heading_error = wrap_angle(heading - t.heading[i]);
    return out;
}

} // namespace

TrackPoint locate(const Track& t, double x, double y, double heading, std::size_t hint)
{
    const std::size_t n = t.s.size();
    hint = std::min(hint, n - 1);
    const std::size_t back = static_cast<std::size_t>(20.0 / t.config.sample_spacing);
    const std::size_t ahead = static_cast<std::size_t>(60.0 / t.config.sample_spacing);
    const std::size_t lo = hint > back ? hint - back : 0;
    const std::size_t hi = std::min(n - 1, hint + ahead);
    return foot_point(t, x, y, heading, lo, hi);
}

TrackPoint locate(const Track& t, double x, double y, double heading)
{
    return foot_point(t, x, y, heading, 0, t.s.size() - 1);
}

double terrain_height(const TrackConfig& config, double d)
{
    if (config.flat_terrain) {
        return 0.0;
    }
    const double u = std::abs(d) - (0.5 * config.lane_width + config.shoulder);
    if (u <= 0.0) {
        return 0.0;
    }
    if (config.surface == Surface::snow) {
        // Plowed snowbank right at the road edge.
        if (u <= 1.5) {
            return 0.7 * std::sin(0.5 * pi * u / 1.5);
        }
        if (u <= 3.0) {
            return 0.7 - 0.2 * (u - 1.5) / 1.5;
        }
        return 0.5;
    }
    // Drainage ditch, then an embankment.
    if (u <= 3.0) {
        return -0.6 * std::sin(pi * u / 3.0);
    }
    if (u <= 6.0) {
        return 0.8 * 0.5 * (1.0 - std::cos(pi * (u - 3.0) / 3.0));
    }
    return 0.8;
}

// ---------------------------------------------------------------------------

VehicleState step_vehicle(const VehicleState& s, const VehicleParams& p, double dt, double yaw_disturbance)
{
    const double delta = s.steering_wheel_deg / p.steering_ratio * deg;
    const double omega = s.speed * std::tan(delta) / p.wheelbase + yaw_disturbance;
    VehicleState out = s;
    if (std::abs(omega) < 1e-12) {
        out.x += s.speed * dt * std::cos(s.heading);
        out.y += s.speed * dt * std::sin(s.heading);
    } else {
        const double h1 = s.heading + omega * dt;
        out.x += s.speed / omega * (std::sin(h1) - std::sin(s.heading));
        out.y += s.speed / omega * (std::cos(s.heading) - std::cos(h1));
        out.heading = h1;
    }
    return out;
}

double steady_state_wheel_deg(const VehicleParams& p, double radius)
{
    return p.steering_ratio * std::atan(p.wheelbase / radius) / deg;
}

// ---------------------------------------------------------------------------
// Sensors

namespace {

struct Rgb {
    double r, g, b;
};

struct Appearance {
    Rgb road, line, shoulder, offroad, track_mark;
    double refl_road, refl_line, refl_shoulder, refl_offroad, refl_post;
    bool lines;
    bool tire_tracks;
};

Appearance appearance(Surface s)
{
    switch (s) {
    case Surface::asphalt_lines:
        return {{0.30, 0.30, 0.32}, {0.92, 0.92, 0.88}, {0.48, 0.44, 0.38}, {0.20, 0.40, 0.14}, {0.30, 0.30, 0.32},
                0.12, 0.55, 0.22, 0.35, 0.9, true, false};
    case Surface::asphalt_no_lines:
        return {{0.33, 0.33, 0.35}, {0.33, 0.33, 0.35}, {0.50, 0.46, 0.40}, {0.22, 0.42, 0.15}, {0.33, 0.33, 0.35},
                0.13, 0.13, 0.22, 0.35, 0.9, false, false};
    case Surface::gravel:
        return {{0.56, 0.49, 0.39}, {0.56, 0.49, 0.39}, {0.52, 0.47, 0.38}, {0.24, 0.40, 0.17}, {0.48, 0.42, 0.33},
                0.28, 0.28, 0.27, 0.35, 0.9, false, true};
    case Surface::snow:
        return {{0.80, 0.81, 0.84}, {0.80, 0.81, 0.84}, {0.88, 0.88, 0.91}, {0.95, 0.95, 0.97}, {0.68, 0.68, 0.72},
                0.55, 0.55, 0.65, 0.75, 0.9, false, true};
    }
    return appearance(Surface::asphalt_lines);
}

constexpr double line_width = 0.15;
constexpr double track_mark_offset = 0.8;
constexpr double track_mark_width = 0.45;

/// Piecewise-constant cross-section of the road, sorted by lateral position.
struct Band {
    double lo, hi;
    Rgb color;
};

std::vector<Band> cross_section(const Track& t, const Appearance& a)
{
    const double lh = t.lane_half(), rh = t.road_half();
    std::vector<Band> bands;
    bands.push_back({-1e9, -rh, a.offroad});
    bands.push_back({-rh, -lh, a.shoulder});
    bands.push_back({-lh, lh, a.road});
    bands.push_back({lh, rh, a.shoulder});
    bands.push_back({rh, 1e9, a.offroad});
    auto paint = [&](double lo, double hi, Rgb c) {
        std::vector<Band> out;
        for (const Band& b : bands) {
            if (b.hi <= lo || b.lo >= hi) {
                out.push_back(b);
                continue;
            }
            if (b.lo < lo) {
                out.push_back({b.lo, lo, b.color});
            }
            if (b.hi > hi) {
                out.push_back({hi, b.hi, b.color});
            }
        }
        out.push_back({lo, hi, c});
        std::sort(out.begin(), out.end(), [](const Band& x, const Band& y) { return x.lo < y.lo; });
        bands = std::move(out);
    };
    if (a.tire_tracks) {
        for (double side : {-1.0, 1.0}) {
            paint(side * track_mark_offset - 0.5 * track_mark_width, side * track_mark_offset + 0.5 * track_mark_width,
                  a.track_mark);
        }
    }
    if (a.lines) {
        for (double side : {-1.0, 1.0}) {
            paint(side * lh - 0.5 * line_width, side * lh + 0.5 * line_width, a.line);
        }
    }
    return bands;
}

/// Mean color of the cross-section over [d - w/2, d + w/2] (box-filtered pixel footprint).
Rgb filtered_color(const std::vector<Band>& bands, double d, double w)
{
    const double lo = d - 0.5 * w, hi = d + 0.5 * w;
    Rgb acc{0, 0, 0};
    for (const Band& b : bands) {
        const double o = std::min(hi, b.hi) - std::max(lo, b.lo);
        if (o > 0.0) {
            acc.r += o * b.color.r;
            acc.g += o * b.color.g;
            acc.b += o * b.color.b;
        }
    }
    return {acc.r / w, acc.g / w, acc.b / w};
}

double hash_noise(std::int64_t i, std::int64_t j, std::uint64_t salt)
{
    const std::uint64_t h = mix64(static_cast<std::uint64_t>(i) * 0x9e3779b97f4a7c15ULL ^
                                  mix64(static_cast<std::uint64_t>(j) + salt));
    return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

/// Centerline samples expressed in the sensor's ground frame (u forward, v left).
struct LocalRoad {
    std::vector<double> u, v, phi, s;

    bool empty() const { return u.size() < 2; }

    /// Centerline lateral position, relative heading and arclength at forward distance x.
    std::optional<std::array<double, 3>> at(double x) const
    {
        if (empty() || x < u.front() || x > u.back()) {
            return std::nullopt;
        }
        const auto it = std::upper_bound(u.begin(), u.end(), x);
        const std::size_t i = std::min(static_cast<std::size_t>(it - u.begin()), u.size() - 1);
        const std::size_t j = i - 1;
        const double f = (x - u[j]) / (u[i] - u[j]);
        return std::array<double, 3>{v[j] + f * (v[i] - v[j]), phi[j] + f * (phi[i] - phi[j]), s[j] + f * (s[i] - s[j])};
    }

    /// Signed lateral distance from the centerline of ground point (x, y).
    std::optional<double> lateral(double x, double y) const
    {
        const auto c = at(x);
        if (!c) {
            return std::nullopt;
        }
        return (y - (*c)[0]) * std::cos((*c)[1]);
    }
};

LocalRoad local_road(const Track& t, double px, double py, double heading, double reach)
{
    const TrackPoint tp = locate(t, px, py, heading);
    const double c = std::cos(heading), s = std::sin(heading);
    LocalRoad r;
    const std::size_t back = static_cast<std::size_t>(15.0 / t.config.sample_spacing);
    std::size_t i = tp.index > back ? tp.index - back : 0;
    for (; i < t.s.size(); ++i) {
        const double dx = t.x[i] - px, dy = t.y[i] - py;
        const double u = dx * c + dy * s;
        const double phi = wrap_angle(t.heading[i] - heading);
        if (std::abs(phi) > 0.45 * pi) {
            break; // road bends back; later samples are not a function of u
        }
        if (!r.u.empty() && u <= r.u.back()) {
            continue;
        }
        r.u.push_back(u);
        r.v.push_back(-dx * s + dy * c);
        r.phi.push_back(phi);
        r.s.push_back(t.s[i]);
        if (u > reach) {
            break;
        }
    }
    return r;
}

struct WorldPose {
    double x, y, heading;
};

WorldPose sensor_world_pose(const SensorPose& p)
{
    const double h = p.heading;
    return {p.x - p.offset.lateral * std::sin(h), p.y + p.offset.lateral * std::cos(h), h + p.offset.yaw};
}

} // namespace

nn::Tensor<float> render_camera(const Track& track, const SensorPose& pose, const CameraConfig& cam,
                                const Weather& weather, std::uint64_t seed)
{
    const WorldPose wp = sensor_world_pose(pose);
    const Appearance a = appearance(track.config.surface);
    const std::vector<Band> bands = cross_section(track, a);
    const double f = 0.5 * double(cam.cols) / std::tan(0.5 * cam.horizontal_fov_deg * deg);
    const double height = cam.height + pose.offset.vertical;
    const double far = height * f / (0.5 + cam.horizon_offset_rows);
    const LocalRoad road = local_road(track, wp.x, wp.y, wp.heading, far + 5.0);
    const double c = std::cos(wp.heading), s = std::sin(wp.heading);
    Rng rng(seed);
    const std::size_t plane = cam.rows * cam.cols;
    nn::Tensor<float> img({3, cam.rows, cam.cols});
    for (std::size_t i = 0; i < cam.rows; ++i) {
        const double x = height * f / (double(i) + 0.5 + cam.horizon_offset_rows);
        const auto center = road.at(x);
        const double footprint = x / f;
        const double texture = cam.texture_noise * std::min(1.0, 0.3 / footprint);
        for (std::size_t j = 0; j < cam.cols; ++j) {
            const double y = -(double(j) + 0.5 - 0.5 * double(cam.cols)) / f * x;
            Rgb col = a.offroad;
            if (center) {
                const double cphi = std::cos((*center)[1]);
                col = filtered_color(bands, (y - (*center)[0]) * cphi, footprint * cphi);
            }
            const double wx = wp.x + x * c - y * s, wy = wp.y + x * s + y * c;
            const double n = 1.0 + texture * hash_noise(std::llround(wx * 4.0), std::llround(wy * 4.0), track.seed);
            std::array<float, 3> rgb;
            const double ch[3] = {col.r, col.g, col.b};
            const double sensor = cam.pixel_noise * rng.normal();
            for (int k = 0; k < 3; ++k) {
                const double v = (ch[k] * n + sensor) * weather.exposure;
                rgb[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
            const auto yuv = augment::rgb_to_yuv(rgb);
            img[i * cam.cols + j] = yuv[0];
            img[plane + i * cam.cols + j] = yuv[1];
            img[2 * plane + i * cam.cols + j] = yuv[2];
        }
    }
    return img;
}

std::vector<PixelClass> camera_pixel_classes(const Track& track, const SensorPose& pose, const CameraConfig& cam)
{
    const WorldPose wp = sensor_world_pose(pose);
    const Appearance a = appearance(track.config.surface);
    const double f = 0.5 * double(cam.cols) / std::tan(0.5 * cam.horizontal_fov_deg * deg);
    const double height = cam.height + pose.offset.vertical;
    const double far = height * f / (0.5 + cam.horizon_offset_rows);
    const LocalRoad road = local_road(track, wp.x, wp.y, wp.heading, far + 5.0);
    const double lh = track.lane_half(), rh = track.road_half();
    std::vector<PixelClass> out(cam.rows * cam.cols, PixelClass::offroad);
    for (std::size_t i = 0; i < cam.rows; ++i) {
        const double x = height * f / (double(i) + 0.5 + cam.horizon_offset_rows);
        const auto center = road.at(x);
        if (!center) {
            continue;
        }
        const double cphi = std::cos((*center)[1]);
        const double w = x / f * cphi;
        for (std::size_t j = 0; j < cam.cols; ++j) {
            const double y = -(double(j) + 0.5 - 0.5 * double(cam.cols)) / f * x;
            const double d = (y - (*center)[0]) * cphi;
            const double lo = d - 0.5 * w, hi = d + 0.5 * w;
            double paint = 0.0;
            if (a.lines) {
                for (double side : {-lh, lh}) {
                    paint += std::max(0.0, std::min(hi, side + 0.5 * line_width) - std::max(lo, side - 0.5 * line_width));
                }
            }
            PixelClass& cls = out[i * cam.cols + j];
            if (paint >= 0.5 * w) {
                cls = PixelClass::lane_line;
            } else if (lo > rh || hi < -rh) {
                cls = PixelClass::offroad;
            } else if (std::abs(d) < lh) {
                cls = PixelClass::road;
            } else {
                cls = PixelClass::shoulder;
            }
        }
    }
    return out;
}

LidarRender render_lidar(const Track& track, const SensorPose& pose, const LidarConfig& cfg, std::uint64_t seed)
{
    const WorldPose wp = sensor_world_pose(pose);
    const Appearance a = appearance(track.config.surface);
    const lidar::RangeGeometry& g = cfg.geometry;
    const double height = cfg.height + pose.offset.vertical;
    const LocalRoad road = local_road(track, wp.x, wp.y, wp.heading, cfg.max_range + 5.0);
    const double c = std::cos(wp.heading), s = std::sin(wp.heading);
    const double lh = track.lane_half(), rh = track.road_half();
    const TrackConfig& tc = track.config;

    std::vector<double> ring_gain(g.rows);
    {
        Rng gains(derive_seed(cfg.sensor_seed, {0x6761696e}));
        for (double& v : ring_gain) {
            v = gains.uniform(0.6, 1.4);
        }
    }

    // Posts in the sensor frame.
    struct LocalPost {
        double u, v, base;
    };
    std::vector<LocalPost> posts;
    const double post_radius = 0.12, post_height = 1.2;
    for (const Post& p : track.posts) {
        const double dx = p.x - wp.x, dy = p.y - wp.y;
        const double u = dx * c + dy * s, v = -dx * s + dy * c;
        if (u > 0.0 && u < cfg.max_range && std::abs(v) < cfg.max_range) {
            posts.push_back({u, v, terrain_height(tc, rh + tc.post_offset)});
        }
    }

    const double max_terrain = tc.flat_terrain ? 0.0 : 0.8;
    const double min_terrain = tc.flat_terrain ? 0.0 : -0.6;
    Rng rng(seed);
    LidarRender out;
    for (std::size_t r = 0; r < g.rows; ++r) {
        const double el = g.row_elevation_deg(r) * deg;
        for (std::size_t col = 0; col < g.cols; ++col) {
            const double az = g.column_azimuth_deg(col) * deg;
            const double dx = std::cos(el) * std::cos(az), dy = std::cos(el) * std::sin(az), dz = std::sin(el);
            const bool dropped = rng.bernoulli(cfg.dropout);
            const double noise = rng.normal();
            if (dropped || dz >= 0.0) {
                continue;
            }
            // Terrain: march between the heights the terrain can occupy, then bisect.
            auto gap = [&](double t) -> std::optional<double> {
                const auto d = road.lateral(t * dx, t * dy);
                if (!d) {
                    return std::nullopt;
                }
                return height + t * dz - terrain_height(tc, *d);
            };
            double hit = std::numeric_limits<double>::infinity();
            const double t0 = std::max(0.1, (height - max_terrain) / -dz);
            const double t1 = std::min(cfg.max_range, (height - min_terrain) / -dz + 0.5);
            double prev_t = t0;
            auto prev = gap(t0);
            for (double t = t0 + 0.25; prev && t <= t1 + 0.25; t += 0.25) {
                const double tt = std::min(t, t1);
                const auto cur = gap(tt);
                if (!cur) {
                    break;
                }
                if (*cur <= 0.0) {
                    double lo = prev_t, hi = tt;
                    for (int it = 0; it < 40; ++it) {
                        const double mid = 0.5 * (lo + hi);
                        const auto m = gap(mid);
                        if (m && *m > 0.0) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    hit = hi;
                    break;
                }
                prev_t = tt;
                prev = cur;
                if (tt >= t1) {
                    break;
                }
            }
            // The road body is exactly flat; use the closed form there.
            if (std::isfinite(hit)) {
                const double flat = height / -dz;
                const auto d = road.lateral(flat * dx, flat * dy);
                if (d && std::abs(*d) <= rh && std::abs(flat - hit) < 0.5) {
                    hit = flat;
                }
            }
            bool post_hit = false;
            for (const LocalPost& p : posts) {
                // |t * (dx, dy) - (u, v)| = radius, horizontal components only.
                const double A = dx * dx + dy * dy, B = -2.0 * (dx * p.u + dy * p.v);
                const double C = p.u * p.u + p.v * p.v - post_radius * post_radius;
                const double disc = B * B - 4.0 * A * C;
                if (disc < 0.0) {
                    continue;
                }
                const double t = (-B - std::sqrt(disc)) / (2.0 * A);
                const double z = height + t * dz;
                if (t > 0.0 && t < hit && z >= p.base && z <= p.base + post_height) {
                    hit = t;
                    post_hit = true;
                }
            }
            if (!std::isfinite(hit) || hit > cfg.max_range) {
                continue;
            }
            double albedo = a.refl_offroad;
            bool is_road = false;
            if (post_hit) {
                albedo = a.refl_post;
            } else if (const auto d = road.lateral(hit * dx, hit * dy)) {
                const double ad = std::abs(*d);
                if (a.lines && std::abs(ad - lh) <= 0.5 * line_width) {
                    albedo = a.refl_line;
                } else if (ad < lh) {
                    albedo = a.refl_road;
                    is_road = true;
                } else if (ad <= rh) {
                    albedo = a.refl_shoulder;
                }
            }
            lidar::LidarPoint p;
            p.x = hit * dx;
            p.y = hit * dy;
            p.z = hit * dz;
            p.reflectance = std::max(0.0, albedo * ring_gain[r] * (1.0 + cfg.reflectance_noise * noise));
            p.ring = static_cast<int>(r);
            out.scan.points.push_back(p);
            out.road.push_back(is_road);
        }
    }
    return out;
}

} // namespace steerfuse::sim
