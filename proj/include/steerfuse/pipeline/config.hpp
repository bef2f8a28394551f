#pragma once

#include "steerfuse/arch/network.hpp"
#include "steerfuse/augment/augment.hpp"
#include "steerfuse/data/dataset.hpp"
#include "steerfuse/sim/drive.hpp"
#include "steerfuse/sim/world.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerfuse::pipeline {

/// Bad or unknown configuration; the CLI maps it to its own exit code.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Resolution { full, half };
std::string_view to_string(Resolution r);

struct SequenceSpec {
    std::string name;        // test-set name; informational for train sequences
    sim::Surface surface = sim::Surface::asphalt_lines;
    std::size_t count = 1;   // sequences of this kind
    std::size_t frames = 1000; // labeled time steps per sequence
    double exposure = 1.0;
    std::optional<sim::TrackConfig> track; // overrides world.track
};

struct WorldConfig {
    Resolution resolution = Resolution::full;
    sim::CameraConfig camera;     // sized from the resolution unless given
    sim::LidarConfig lidar;
    sim::VehicleParams vehicle;
    sim::TrackConfig track;
};

struct DataConfig {
    std::vector<SequenceSpec> train;
    std::vector<SequenceSpec> test;
    std::array<double, 2> speed_kmh{25.0, 40.0};
    std::vector<augment::PoseOffset> poses{{0.0, 0.0, 0.0}, {0.39, 0.08, 0.0}, {-0.39, 0.08, 0.0}};
    double steering_correction_gain = 0.52;
    augment::GainUnit steering_correction_unit = augment::GainUnit::rad_per_m;
    double lookahead = 13.24;
    double wander_sigma = 0.0;
    std::size_t label_lead = 2;
    data::BalanceConfig balance;
    data::SplitConfig split;
    std::size_t calibration_stride = 10; // every n-th center scan feeds the reflectance fit
};

struct TrainConfig {
    std::vector<arch::Variant> variants{arch::Variant::camera, arch::Variant::lidar, arch::Variant::dual,
                                        arch::Variant::cgdual};
    std::size_t epochs = 12;
    double lr = 1e-4;
    std::size_t batch_size = 32;
    std::size_t seeds = 5;
    bool jitter = true;
    augment::JitterConfig jitter_config;
    std::string data; // frame store directory
};

struct EvalConfig {
    std::string data;        // frame store directory
    std::string checkpoints; // directory with checkpoint-<variant>-<seed>.bin
    std::vector<double> overexposure{4.0};
    std::string predictor = "network"; // network, or replay (predicts the stored label)
};

struct SimConfig {
    std::string checkpoint;  // empty with controller = oracle
    std::string controller = "network"; // network or oracle
    sim::Surface surface = sim::Surface::asphalt_lines;
    std::optional<sim::TrackConfig> track;
    double speed_kmh = 30.0;
    double duration = 300.0;
    double exposure = 1.0;
    double penalty = 6.0;
    double merge_window = 3.0;
    sim::SmootherConfig smoother;
    std::string reflectance_from; // frame store whose reflectance model to use; empty = checkpoint
};

struct VisualizeConfig {
    std::string checkpoint;
    sim::Surface surface = sim::Surface::asphalt_lines;
    std::size_t frames = 3;
    double spacing = 40.0; // m between rendered frames
    float max_alpha = 1.0f;
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string output = "out";
    WorldConfig world;
    DataConfig data;
    TrainConfig train;
    EvalConfig eval;
    SimConfig sim;
    VisualizeConfig visualize;
};

/// Strict parse: unknown keys, wrong types and invalid values raise ConfigError.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

/// Camera config for the configured resolution (full 63x306, half 32x153).
sim::CameraConfig camera_for(const WorldConfig& w);
sim::LidarConfig lidar_for(const WorldConfig& w);
arch::Geometry geometry_for(Resolution r);

} // namespace steerfuse::pipeline
