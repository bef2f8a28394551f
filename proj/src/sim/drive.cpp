#include "steerfuse/sim/drive.hpp"

#include "steerfuse/util/rng.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace steerfuse::sim {

namespace {
constexpr double deg = std::numbers::pi / 180.0;
}

double PurePursuit::command(const Track& track, const VehicleState& state, std::size_t& hint) const
{
    const TrackPoint here = locate(track, state.x, state.y, state.heading, hint);
    hint = here.index;
    // Walk forward to the first centerline point at Euclidean distance >= lookahead.
    double s = here.s + lookahead;
    CenterPose target = centerline_at(track, s);
    for (int it = 0; it < 8; ++it) {
        const double dist = std::hypot(target.x - state.x, target.y - state.y);
        if (std::abs(dist - lookahead) < 1e-4 || s >= track.length()) {
            break;
        }
        s = std::min(track.length(), s + (lookahead - dist));
        target = centerline_at(track, s);
    }
    const double dx = target.x - state.x, dy = target.y - state.y;
    const double alpha = std::atan2(dy, dx) - state.heading;
    const double ld = std::hypot(dx, dy);
    const double delta = std::atan(2.0 * vehicle.wheelbase * std::sin(alpha) / ld);
    return vehicle.steering_ratio * delta / deg;
}

std::vector<DriveSample> expert_drive(const Track& track, const ExpertConfig& config, std::uint64_t seed)
{
    if (!(config.speed > 0.0) || !(config.dt > 0.0)) {
        throw std::invalid_argument("expert speed and dt must be positive");
    }
    const CenterPose c0 = centerline_at(track, config.start_s);
    VehicleState state{c0.x, c0.y, c0.heading, config.speed, 0.0};
    Rng rng(derive_seed(seed, {0x657870}));
    const double a = std::exp(-config.dt / config.wander_tau);
    const double kick = config.wander_sigma * std::sqrt(1.0 - a * a);
    double wander = 0.0;
    std::size_t hint = locate(track, state.x, state.y, state.heading).index;
    std::vector<DriveSample> out;
    for (std::size_t k = 0;; ++k) {
        const double wheel = config.controller.command(track, state, hint);
        if (std::abs(wheel) > config.controller.vehicle.max_wheel_deg) {
            throw TrackInfeasible("expert needs " + std::to_string(wheel) + " deg of steering wheel at s = " +
                                  std::to_string(locate(track, state.x, state.y, state.heading, hint).s) + " m");
        }
        state.steering_wheel_deg = wheel;
        const TrackPoint where = locate(track, state.x, state.y, state.heading, hint);
        if (where.s > track.length() - config.end_margin || (config.max_frames && k >= config.max_frames)) {
            break;
        }
        out.push_back({double(k) * config.dt, state, where});
        wander = a * wander + kick * rng.normal();
        state = step_vehicle(state, config.controller.vehicle, config.dt, wander);
    }
    return out;
}

// ---------------------------------------------------------------------------

void SmootherConfig::validate() const
{
    if (!(decay >= 0.0 && decay <= 1.0)) {
        throw std::invalid_argument("smoother decay must be in [0, 1]");
    }
    if (!(max_delta > 0.0) || !(clamp > 0.0)) {
        throw std::invalid_argument("smoother max_delta and clamp must be positive");
    }
}

Smoother::Smoother(SmootherConfig config, double initial_command) : config_(config), command_(initial_command)
{
    config_.validate();
}

SmoothStep Smoother::step(double raw)
{
    if (!std::isfinite(raw)) {
        return {ema_.value_or(command_), command_, true};
    }
    const double w = config_.weight_on_current ? config_.decay : 1.0 - config_.decay;
    const double s = ema_ ? w * raw + (1.0 - w) * *ema_ : raw;
    ema_ = s;
    const double limited = std::clamp(s, command_ - config_.max_delta, command_ + config_.max_delta);
    command_ = std::clamp(limited, -config_.clamp, config_.clamp);
    return {s, command_, false};
}

void Smoother::reset(double command)
{
    ema_.reset();
    command_ = command;
}

// ---------------------------------------------------------------------------

InterventionSummary summarize_interventions(std::span<const double> event_times, double autonomous_time,
                                            double penalty, double merge_window)
{
    if (!std::is_sorted(event_times.begin(), event_times.end())) {
        throw std::invalid_argument("intervention times must be sorted");
    }
    InterventionSummary out;
    out.events = static_cast<int>(event_times.size());
    out.autonomous_time = autonomous_time;
    out.operation_time = autonomous_time + penalty * double(event_times.size());
    for (std::size_t i = 0; i < event_times.size(); ++i) {
        const double gap = i ? event_times[i] - event_times[i - 1] : merge_window;
        if (i && gap < merge_window) {
            out.autonomous_time -= gap;
        } else {
            ++out.interventions;
        }
    }
    return out;
}

RunMetrics closed_loop_eval(const Track& track, const ClosedLoopConfig& config, const Policy& policy,
                            std::uint64_t seed)
{
    if (!(config.dt > 0.0) || !(config.speed > 0.0)) {
        throw std::invalid_argument("closed loop speed and dt must be positive");
    }
    const CenterPose c0 = centerline_at(track, config.start_s);
    VehicleState state{c0.x, c0.y, c0.heading, config.speed, 0.0};
    Smoother smoother(config.smoother);
    std::size_t hint = locate(track, state.x, state.y, state.heading).index;
    RunMetrics m;
    double autonomous = 0.0;
    double lateral_sq = 0.0;
    std::size_t frames = 0;
    const std::size_t max_steps = static_cast<std::size_t>(std::llround(config.duration / config.dt));
    for (std::size_t k = 0; k < max_steps; ++k) {
        TrackPoint where = locate(track, state.x, state.y, state.heading, hint);
        hint = where.index;
        if (where.s > track.length() - config.end_margin) {
            break;
        }
        nn::Tensor<float> camera;
        lidar::RangeImage range;
        Observation obs{nullptr, nullptr, &state, &where};
        if (policy.needs_sensors) {
            const SensorPose pose{state.x, state.y, state.heading, {}};
            camera = render_camera(track, pose, config.camera, config.weather, derive_seed(seed, {k, 1}));
            range = lidar::project(render_lidar(track, pose, config.lidar, derive_seed(seed, {k, 2})).scan,
                                   config.reflectance, config.lidar.geometry)
                        .image;
            obs.camera = &camera;
            obs.lidar = &range;
        }
        const double raw = policy.steer(obs);
        const SmoothStep cmd = smoother.step(raw);
        state.steering_wheel_deg = cmd.command;
        state = step_vehicle(state, config.vehicle, config.dt);
        autonomous += config.dt;

        where = locate(track, state.x, state.y, state.heading, hint);
        hint = where.index;
        TraceRow row{autonomous + config.penalty * double(m.event_times.size()), where.s, where.lateral, raw,
                     cmd.smoothed, cmd.command, false, cmd.held};
        lateral_sq += where.lateral * where.lateral;
        ++frames;
        if (std::abs(where.lateral) > track.lane_half()) {
            row.intervention = true;
            m.event_times.push_back(autonomous);
            const CenterPose c = centerline_at(track, where.s);
            state = {c.x, c.y, c.heading, config.speed, 0.0};
            smoother.reset(0.0);
        }
        m.trace.push_back(row);
    }
    m.summary = summarize_interventions(m.event_times, autonomous, config.penalty, config.merge_window);
    m.lateral_rms = frames ? std::sqrt(lateral_sq / double(frames)) : 0.0;
    return m;
}

Policy centerline_oracle(const Track& track, PurePursuit controller)
{
    auto hint = std::make_shared<std::size_t>(0);
    return {false, [&track, controller, hint](const Observation& obs) {
                return controller.command(track, *obs.state, *hint);
            }};
}

double rmse(std::span<const double> predicted, std::span<const double> label)
{
    if (predicted.size() != label.size()) {
        throw std::invalid_argument("rmse: " + std::to_string(predicted.size()) + " predictions for " +
                                    std::to_string(label.size()) + " labels");
    }
    if (label.empty()) {
        throw std::invalid_argument("rmse of an empty sequence");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < label.size(); ++i) {
        const double e = predicted[i] - label[i];
        acc += e * e;
    }
    return std::sqrt(acc / double(label.size()));
}

} // namespace steerfuse::sim
