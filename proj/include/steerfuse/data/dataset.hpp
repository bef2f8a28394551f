#pragma once

#include "steerfuse/arch/network.hpp"
#include "steerfuse/augment/augment.hpp"
#include "steerfuse/lidar/range_image.hpp"
#include "steerfuse/nn/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace steerfuse::data {

// ---------------------------------------------------------------------------
// Labels, split, balancing

/// label[t] = steering[t + lead]; the last `lead` frames have no label.
/// Throws std::invalid_argument for sequences shorter than lead + 1 frames.
std::vector<double> assign_labels(std::span<const double> steering, std::size_t lead = 2);

struct SplitConfig {
    double window = 2.0;  // s held out
    double period = 20.0; // s between window starts
    double dt = 0.1;

    void validate() const;
};

/// True for frames inside [k * period, k * period + window) seconds.
bool in_validation(std::size_t step, const SplitConfig& cfg);

struct BalanceConfig {
    double threshold = 30.0; // deg of steering wheel
    std::size_t max_multiplicity = 8;

    void validate() const;
};

struct Balance {
    std::size_t curve_multiplicity = 1;
    std::vector<std::size_t> indices; // weighted index list into the input
};

/// Frames with |label| >= threshold repeat min(max, ceil(straight / curve)) times.
Balance balance(std::span<const double> labels, const BalanceConfig& cfg);

/// For each query time, index of the closest candidate time (earliest on ties).
std::vector<std::size_t> match_closest(std::span<const double> query, std::span<const double> candidates);

// ---------------------------------------------------------------------------
// Frames and the on-disk store

/// Fixed-size little-endian record header: 3 x int64, 9 x float64, 1 x int64.
struct FrameHeader {
    std::int64_t step = 0;     // frame index within the sequence (10 Hz)
    std::int64_t sequence = 0;
    std::int64_t pose = 0;     // index into the sequence's pose list
    double camera_time = 0.0;  // s
    double lidar_time = 0.0;   // s
    double steering = 0.0;     // measured steering wheel angle, deg
    double label = 0.0;        // training target, deg
    augment::PoseOffset offset;
    double speed = 0.0;        // m/s
    double lateral = 0.0;      // m from the centerline, recording pose
    std::int64_t surface = 0;

    bool operator==(const FrameHeader&) const = default;
};

inline constexpr std::size_t frame_header_bytes = 13 * 8;

struct Frame {
    FrameHeader header;
    nn::Tensor<float> camera; // 3 x H x W YUV
    lidar::RangeImage lidar;
};

struct CameraShape {
    std::size_t rows = 63;
    std::size_t cols = 306;
    bool operator==(const CameraShape&) const = default;
};

struct SequenceInfo {
    std::int64_t id = 0;
    std::string dir;            // relative to the store root
    std::string role = "train"; // train or test
    std::string surface;
    std::uint64_t track_seed = 0;
    double speed = 0.0;
    double exposure = 1.0;
    std::size_t steps = 0;      // labeled time steps
    std::vector<augment::PoseOffset> poses;
    std::string test_set;       // grouping name for test sequences
};

struct Manifest {
    int version = 1;
    CameraShape camera;
    lidar::RangeGeometry lidar;
    std::vector<SequenceInfo> sequences;
    arch::NormStats norm;
    lidar::ReflectanceModel reflectance = lidar::ReflectanceModel::identity();
    BalanceConfig balance;
    SplitConfig split;
    double steering_gain = 0.52;
    augment::GainUnit gain_unit = augment::GainUnit::rad_per_m;
    std::uint64_t seed = 0;
    nlohmann::json generator = nlohmann::json::object(); // settings echo

    std::size_t record_floats() const { return 3 * camera.rows * camera.cols + 4 * lidar.rows * lidar.cols; }
    std::size_t record_bytes() const { return frame_header_bytes + 4 * record_floats(); }
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

std::vector<unsigned char> encode_frame(const Frame& f);

/// Appends fixed-size records to `<root>/<dir>/frames.bin`.
class SequenceWriter {
public:
    SequenceWriter(const std::filesystem::path& root, const std::string& dir, CameraShape camera,
                   lidar::RangeGeometry lidar);
    ~SequenceWriter();
    SequenceWriter(const SequenceWriter&) = delete;
    SequenceWriter& operator=(const SequenceWriter&) = delete;

    void append(const Frame& f);
    std::size_t count() const { return count_; }
    void close();

private:
    std::FILE* file_ = nullptr;
    std::filesystem::path path_;
    CameraShape camera_;
    lidar::RangeGeometry lidar_;
    std::size_t count_ = 0;
};

void write_manifest(const std::filesystem::path& root, const Manifest& m);

struct FrameRef {
    std::uint32_t sequence = 0; // position in Manifest::sequences
    std::uint32_t record = 0;
    bool operator==(const FrameRef&) const = default;
    auto operator<=>(const FrameRef&) const = default;
};

/// Read-only view of a generated dataset. Concurrent reads are safe.
class FrameStore {
public:
    explicit FrameStore(const std::filesystem::path& root);
    ~FrameStore();
    FrameStore(const FrameStore&) = delete;
    FrameStore& operator=(const FrameStore&) = delete;

    const Manifest& manifest() const { return manifest_; }
    const std::filesystem::path& root() const { return root_; }
    std::size_t records(std::size_t sequence) const { return headers_.at(sequence).size(); }
    const FrameHeader& header(FrameRef r) const { return headers_.at(r.sequence).at(r.record); }

    Frame read(FrameRef r) const;
    /// Reads into caller buffers of the manifest's camera and lidar sizes.
    void read_into(FrameRef r, std::span<float> camera, std::span<float> lidar) const;

private:
    std::filesystem::path root_;
    Manifest manifest_;
    std::vector<int> fds_;
    std::vector<std::vector<FrameHeader>> headers_;
};

/// Frame references by role. Validation is split into all poses (augmented)
/// and the center pose only.
struct Splits {
    std::vector<FrameRef> train;
    std::vector<FrameRef> validation_augmented;
    std::vector<FrameRef> validation_center;
    std::vector<FrameRef> test;
};

Splits make_splits(const FrameStore& store);

/// Weighted training list after balancing on the stored labels.
std::vector<FrameRef> weighted_training_list(const FrameStore& store, const std::vector<FrameRef>& train,
                                             std::size_t* multiplicity = nullptr);

/// Per-channel mean and population std over the given frames (double accumulation).
arch::NormStats compute_norm_stats(const FrameStore& store, const std::vector<FrameRef>& frames);

class NormAccumulator {
public:
    void add(std::span<const float> camera, std::span<const float> lidar, std::size_t camera_plane,
             std::size_t lidar_plane);
    arch::NormStats finish() const;

private:
    std::array<double, 3> cam_sum_{}, cam_sq_{};
    std::array<double, 4> lid_sum_{}, lid_sq_{};
    double cam_n_ = 0.0, lid_n_ = 0.0;
};

// ---------------------------------------------------------------------------
// Batches

struct BatchOptions {
    std::size_t batch_size = 32;
    bool shuffle = true;
    bool jitter = false;
    augment::JitterConfig jitter_config;
    double overexposure = 1.0; // camera exposure factor applied at read time
    bool camera = true;
    bool lidar = true;
    std::optional<arch::NormStats> norm; // defaults to the manifest's statistics
};

struct Batch {
    nn::Tensor<float> camera; // N x 3 x H x W, normalized
    nn::Tensor<float> lidar;  // N x 4 x R x C, normalized
    std::vector<float> labels;
    std::vector<FrameRef> refs;
};

/// Deterministic pass over `frames` for one epoch: shuffle from (seed, epoch),
/// per-sample jitter from (seed, epoch, position), then normalization.
class BatchIterator {
public:
    BatchIterator(const FrameStore& store, std::vector<FrameRef> frames, BatchOptions options, std::uint64_t seed,
                  std::uint64_t epoch);

    std::size_t batch_count() const;
    const std::vector<FrameRef>& order() const { return order_; }
    bool next(Batch& out);

private:
    const FrameStore& store_;
    std::vector<FrameRef> order_;
    BatchOptions options_;
    std::uint64_t seed_;
    std::uint64_t epoch_;
    std::size_t position_ = 0;
};

} // namespace steerfuse::data
