#pragma once

#include "steerfuse/lidar/range_image.hpp"
#include "steerfuse/nn/tensor.hpp"
#include "steerfuse/sim/world.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace steerfuse::sim {

/// Centerline follower. With lookahead l the wheel response to a small lateral
/// offset is ratio * 2L / l^2 rad per meter; 13.24 m puts it near 0.52.
struct PurePursuit {
    double lookahead = 13.24; // m
    VehicleParams vehicle;

    /// Steering wheel command in degrees; `hint` tracks the foot point between calls.
    double command(const Track& track, const VehicleState& state, std::size_t& hint) const;
};

struct ExpertConfig {
    double speed = 30.0 / 3.6; // m/s
    double dt = 0.1;           // s, 10 Hz
    double start_s = 5.0;      // m
    double end_margin = 30.0;  // stop this far before the track end
    std::size_t max_frames = 0; // 0 = until the end margin
    PurePursuit controller;
    // Ornstein-Uhlenbeck yaw-rate disturbance; zero keeps the expert on the centerline.
    double wander_sigma = 0.0; // rad/s stationary std
    double wander_tau = 2.0;   // s
};

struct DriveSample {
    double time = 0.0; // s since start
    VehicleState state; // pose at capture time, wheel = command applied next
    TrackPoint where;
};

/// Expert demonstration at a fixed speed. Throws TrackInfeasible when the
/// expert needs more wheel than the actuator allows.
std::vector<DriveSample> expert_drive(const Track& track, const ExpertConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct SmootherConfig {
    double decay = 0.9;            // weight of the newest raw output
    bool weight_on_current = true; // false: decay weights the previous average
    double max_delta = 10.0;       // deg per frame
    double clamp = 540.0;          // deg

    void validate() const;
};

struct SmoothStep {
    double smoothed = 0.0; // EMA before the safeguard
    double command = 0.0;
    bool held = false;     // raw was not finite; previous command repeated
};

class Smoother {
public:
    explicit Smoother(SmootherConfig config = {}, double initial_command = 0.0);

    SmoothStep step(double raw);
    void reset(double command = 0.0);
    double command() const { return command_; }

private:
    SmootherConfig config_;
    std::optional<double> ema_;
    double command_ = 0.0;
};

// ---------------------------------------------------------------------------

struct InterventionSummary {
    double operation_time = 0.0;  // s, autonomous plus manual
    double autonomous_time = 0.0; // s
    int events = 0;               // lane departures
    int interventions = 0;        // after merging

    double autonomy() const { return operation_time > 0.0 ? autonomous_time / operation_time : 1.0; }
};

/// Each departure costs `penalty` seconds of manual driving. Departures whose
/// autonomous-clock gap to the previous one is below `merge_window` count as one
/// intervention, and that gap is booked as manual time.
InterventionSummary summarize_interventions(std::span<const double> event_times, double autonomous_time,
                                            double penalty = 6.0, double merge_window = 3.0);

struct TraceRow {
    double time = 0.0;       // s of operation, penalties included
    double s = 0.0;          // m along the track
    double lateral = 0.0;    // m, left positive
    double raw = 0.0;        // deg
    double smoothed = 0.0;   // deg
    double command = 0.0;    // deg
    bool intervention = false;
    bool held = false;
};

struct RunMetrics {
    InterventionSummary summary;
    std::vector<double> event_times; // autonomous clock
    std::vector<TraceRow> trace;
    double lateral_rms = 0.0;
};

struct Observation {
    const nn::Tensor<float>* camera = nullptr; // YUV, null when not rendered
    const lidar::RangeImage* lidar = nullptr;
    const VehicleState* state = nullptr;
    const TrackPoint* where = nullptr;
};

struct Policy {
    bool needs_sensors = true;
    std::function<double(const Observation&)> steer; // deg, positive left
};

struct ClosedLoopConfig {
    double speed = 30.0 / 3.6;
    double dt = 0.1;
    double duration = 300.0;  // s of autonomous driving; also stops at the track end
    double start_s = 5.0;
    double end_margin = 30.0;
    double penalty = 6.0;
    double merge_window = 3.0;
    SmootherConfig smoother;
    VehicleParams vehicle;
    CameraConfig camera;
    LidarConfig lidar;
    lidar::ReflectanceModel reflectance = lidar::ReflectanceModel::identity();
    Weather weather;
};

/// Render, decide, smooth and steer at a fixed rate; departures beyond half a
/// lane reset the car onto the centerline.
RunMetrics closed_loop_eval(const Track& track, const ClosedLoopConfig& config, const Policy& policy,
                            std::uint64_t seed);

/// Pure-pursuit policy that needs no sensors.
Policy centerline_oracle(const Track& track, PurePursuit controller = {});

/// Root mean square of prediction minus label.
double rmse(std::span<const double> predicted, std::span<const double> label);

} // namespace steerfuse::sim
