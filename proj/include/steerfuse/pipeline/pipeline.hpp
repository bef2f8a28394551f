#pragma once

#include "steerfuse/arch/checkpoint.hpp"
#include "steerfuse/pipeline/config.hpp"
#include "steerfuse/sim/drive.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace steerfuse::pipeline {

namespace fs = std::filesystem;

/// Missing inputs, corrupt stores, training that produced nothing. Distinct
/// from ConfigError so the CLI can report a different exit code.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataReport {
    std::size_t sequences = 0;
    std::size_t records = 0;
    std::map<std::string, std::size_t> center_frames_per_surface;
    std::map<std::string, std::size_t> records_per_surface;
};

/// Writes a frame store (manifest.json plus seq-NNNN/frames.bin) under `out`.
/// Train sequences carry every configured pose; test sequences only the
/// center pose. The reflectance model is fitted on center scans of the train
/// sequences before any frame is written.
GenDataReport gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& log);

/// Track used for sequence `index` of a role. Length is extended so the
/// expert can drive `frames` labeled steps at `speed`.
sim::Track sequence_track(const RunConfig& cfg, const SequenceSpec& spec, std::uint64_t seed, double speed);

// ---------------------------------------------------------------------------
// train

struct EpochLog {
    std::size_t epoch = 0;          // 1-based
    double train_loss = 0.0;        // normalized-label MSE
    double validation_loss = 0.0;   // normalized-label MSE, augmented validation
    double validation_rmse = 0.0;   // deg, augmented validation
    double center_rmse = 0.0;       // deg, non-augmented validation
    double seconds = 0.0;
};

struct SeedRun {
    std::uint64_t seed = 0;
    bool diverged = false;
    std::string error;
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0; // argmin of validation_loss, 1-based; 0 when none
    double seconds = 0.0;
    fs::path checkpoint;

    const EpochLog& best() const { return epochs.at(best_epoch - 1); }
};

struct VariantRun {
    arch::Variant variant = arch::Variant::camera;
    std::vector<SeedRun> seeds;
    std::optional<std::size_t> pick; // index into seeds: lowest non-augmented validation RMSE
};

struct TrainReport {
    std::vector<VariantRun> variants;
    double label_mean = 0.0;
    double label_scale = 1.0;
    double constant_center_rmse = 0.0; // train-mean predictor on non-augmented validation
    double constant_validation_rmse = 0.0;
    nlohmann::json metrics;
};

/// Per-seed model seed: config seed plus the seed index.
std::uint64_t run_seed(const RunConfig& cfg, std::size_t index);
std::string checkpoint_name(arch::Variant v, std::uint64_t seed);

/// Trains every configured variant and seed on the frame store at train.data
/// (or `out` when empty); writes checkpoint-<variant>-<seed>.bin and
/// metrics.json to `out`.
TrainReport train(const RunConfig& cfg, const fs::path& out, std::ostream& log);

// ---------------------------------------------------------------------------
// eval

struct CheckpointEval {
    std::string file;
    arch::Variant variant = arch::Variant::camera;
    std::uint64_t seed = 0;
    std::map<std::string, double> test_rmse;   // per test set and "all", clean
    std::map<double, std::map<std::string, double>> overexposed_rmse; // factor -> set -> RMSE
};

struct EvalReport {
    std::vector<CheckpointEval> runs;
    nlohmann::json metrics;
};

/// Scaled network output in steering-wheel degrees for batched normalized inputs.
std::vector<double> predict_batch(arch::LoadedCheckpoint& ckpt, const nn::Tensor<float>& camera,
                                  const nn::Tensor<float>& lidar);

/// RMSE on center-pose test frames, optionally with camera overexposure.
double evaluate_frames(arch::LoadedCheckpoint& ckpt, const data::FrameStore& store,
                       const std::vector<data::FrameRef>& frames, double overexposure = 1.0);

EvalReport evaluate(const RunConfig& cfg, const fs::path& out, std::ostream& log);

// ---------------------------------------------------------------------------
// simulate

struct SimulateReport {
    sim::RunMetrics run;
    nlohmann::json metrics;
};

/// Held-out evaluation track for closed-loop runs.
sim::Track simulation_track(const RunConfig& cfg);

/// Network policy: render, normalize, forward, undo label scaling.
sim::Policy network_policy(arch::LoadedCheckpoint& ckpt);

SimulateReport simulate(const RunConfig& cfg, const fs::path& out, std::ostream& log);

// ---------------------------------------------------------------------------
// visualize

struct MaskStats {
    arch::Modality modality = arch::Modality::camera;
    std::size_t frame = 0;
    double lane_line_mean = 0.0; // camera only
    double offroad_mean = 0.0;   // camera only
    std::size_t lane_line_pixels = 0;
    std::size_t offroad_pixels = 0;
    std::vector<fs::path> files;
};

struct VisualizeReport {
    std::vector<MaskStats> masks;
    nlohmann::json metrics;
};

/// Masks over a straight lane-lined scene. Per frame and modality writes
/// mask-<modality>-<frame>-raw.png, -display.png and -overlay.png.
VisualizeReport visualize(const RunConfig& cfg, const fs::path& out, std::ostream& log);

/// Writes JSON with a trailing newline through a temporary file.
void write_json(const fs::path& path, const nlohmann::json& j);

} // namespace steerfuse::pipeline
