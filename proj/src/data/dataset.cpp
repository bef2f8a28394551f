#include "steerfuse/data/dataset.hpp"

#include "steerfuse/arch/checkpoint.hpp"
#include "steerfuse/util/binary_io.hpp"
#include "steerfuse/util/rng.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <unistd.h>

namespace steerfuse::data {

using nlohmann::json;

std::vector<double> assign_labels(std::span<const double> steering, std::size_t lead)
{
    if (steering.size() < lead + 1) {
        throw std::invalid_argument("sequence of " + std::to_string(steering.size()) +
                                    " frames is too short to label (need " + std::to_string(lead + 1) + ")");
    }
    return {steering.begin() + static_cast<std::ptrdiff_t>(lead), steering.end()};
}

void SplitConfig::validate() const
{
    if (!(dt > 0.0) || !(period > 0.0) || !(window >= 0.0) || window > period) {
        throw std::invalid_argument("split needs dt > 0, period > 0 and 0 <= window <= period");
    }
}

bool in_validation(std::size_t step, const SplitConfig& cfg)
{
    // Integer frame arithmetic avoids 0.1 s rounding at window edges.
    const auto period = static_cast<std::size_t>(std::llround(cfg.period / cfg.dt));
    const auto window = static_cast<std::size_t>(std::llround(cfg.window / cfg.dt));
    return step % period < window;
}

void BalanceConfig::validate() const
{
    if (!(threshold > 0.0) || max_multiplicity < 1) {
        throw std::invalid_argument("balance threshold must be positive and max_multiplicity at least 1");
    }
}

Balance balance(std::span<const double> labels, const BalanceConfig& cfg)
{
    cfg.validate();
    std::size_t curves = 0;
    for (double l : labels) {
        curves += std::abs(l) >= cfg.threshold;
    }
    const std::size_t straight = labels.size() - curves;
    Balance out;
    if (curves > 0 && straight > 0) {
        out.curve_multiplicity = std::min(cfg.max_multiplicity, (straight + curves - 1) / curves);
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::size_t m = std::abs(labels[i]) >= cfg.threshold ? out.curve_multiplicity : 1;
        out.indices.insert(out.indices.end(), m, i);
    }
    return out;
}

std::vector<std::size_t> match_closest(std::span<const double> query, std::span<const double> candidates)
{
    if (candidates.empty()) {
        throw std::invalid_argument("no candidate timestamps to match against");
    }
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return candidates[a] < candidates[b]; });
    std::vector<std::size_t> out;
    out.reserve(query.size());
    for (double q : query) {
        const auto it = std::lower_bound(order.begin(), order.end(), q,
                                         [&](std::size_t i, double v) { return candidates[i] < v; });
        std::size_t best = order.front();
        double best_d = std::numeric_limits<double>::infinity();
        auto consider = [&](std::size_t i) {
            const double d = std::abs(candidates[i] - q);
            if (d < best_d || (d == best_d && i < best)) {
                best = i;
                best_d = d;
            }
        };
        if (it != order.end()) {
            consider(*it);
            // Equal timestamps after the first.
            for (auto j = it + 1; j != order.end() && candidates[*j] == candidates[*it]; ++j) {
                consider(*j);
            }
        }
        if (it != order.begin()) {
            const double prev = candidates[*(it - 1)];
            for (auto j = it; j != order.begin() && candidates[*(j - 1)] == prev; --j) {
                consider(*(j - 1));
            }
        }
        out.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

json offset_json(const augment::PoseOffset& o) { return {o.lateral, o.vertical, o.yaw}; }

augment::PoseOffset offset_from_json(const json& j)
{
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) {
        throw io::FormatError("pose offset must be [lateral, vertical, yaw]");
    }
    return {v[0], v[1], v[2]};
}

} // namespace

json to_json(const Manifest& m)
{
    json seqs = json::array();
    for (const SequenceInfo& s : m.sequences) {
        json poses = json::array();
        for (const auto& p : s.poses) {
            poses.push_back(offset_json(p));
        }
        seqs.push_back({{"id", s.id},
                        {"dir", s.dir},
                        {"role", s.role},
                        {"surface", s.surface},
                        {"track_seed", s.track_seed},
                        {"speed", s.speed},
                        {"exposure", s.exposure},
                        {"steps", s.steps},
                        {"poses", poses},
                        {"test_set", s.test_set}});
    }
    return {{"format", "steerfuse-frames"},
            {"version", m.version},
            {"camera", {{"rows", m.camera.rows}, {"cols", m.camera.cols}}},
            {"lidar",
             {{"rows", m.lidar.rows},
              {"cols", m.lidar.cols},
              {"elevation_top_deg", m.lidar.elevation_top_deg},
              {"elevation_bottom_deg", m.lidar.elevation_bottom_deg},
              {"azimuth_half_fov_deg", m.lidar.azimuth_half_fov_deg}}},
            {"record_bytes", m.record_bytes()},
            {"sequences", seqs},
            {"norm", arch::to_json(m.norm)},
            {"reflectance_scales", m.reflectance.scales},
            {"balance", {{"threshold", m.balance.threshold}, {"max_multiplicity", m.balance.max_multiplicity}}},
            {"split", {{"window", m.split.window}, {"period", m.split.period}, {"dt", m.split.dt}}},
            {"steering_gain", m.steering_gain},
            {"steering_gain_unit", std::string(augment::to_string(m.gain_unit))},
            {"seed", m.seed},
            {"generator", m.generator}};
}

Manifest manifest_from_json(const json& j)
{
    Manifest m;
    try {
        if (j.at("format").get<std::string>() != "steerfuse-frames") {
            throw io::FormatError("not a steerfuse frame store manifest");
        }
        m.version = j.at("version").get<int>();
        if (m.version != 1) {
            throw io::FormatError("unsupported frame store version " + std::to_string(m.version));
        }
        m.camera.rows = j.at("camera").at("rows").get<std::size_t>();
        m.camera.cols = j.at("camera").at("cols").get<std::size_t>();
        const json& l = j.at("lidar");
        m.lidar.rows = l.at("rows").get<std::size_t>();
        m.lidar.cols = l.at("cols").get<std::size_t>();
        m.lidar.elevation_top_deg = l.at("elevation_top_deg").get<double>();
        m.lidar.elevation_bottom_deg = l.at("elevation_bottom_deg").get<double>();
        m.lidar.azimuth_half_fov_deg = l.at("azimuth_half_fov_deg").get<double>();
        for (const json& s : j.at("sequences")) {
            SequenceInfo info;
            info.id = s.at("id").get<std::int64_t>();
            info.dir = s.at("dir").get<std::string>();
            info.role = s.at("role").get<std::string>();
            info.surface = s.at("surface").get<std::string>();
            info.track_seed = s.at("track_seed").get<std::uint64_t>();
            info.speed = s.at("speed").get<double>();
            info.exposure = s.at("exposure").get<double>();
            info.steps = s.at("steps").get<std::size_t>();
            for (const json& p : s.at("poses")) {
                info.poses.push_back(offset_from_json(p));
            }
            info.test_set = s.value("test_set", "");
            if (info.role != "train" && info.role != "test") {
                throw io::FormatError("sequence " + info.dir + " has unknown role '" + info.role + "'");
            }
            m.sequences.push_back(std::move(info));
        }
        m.norm = arch::norm_from_json(j.at("norm"));
        m.reflectance.scales = j.at("reflectance_scales").get<std::vector<double>>();
        m.reflectance.validate(m.lidar.rows);
        m.balance.threshold = j.at("balance").at("threshold").get<double>();
        m.balance.max_multiplicity = j.at("balance").at("max_multiplicity").get<std::size_t>();
        m.split.window = j.at("split").at("window").get<double>();
        m.split.period = j.at("split").at("period").get<double>();
        m.split.dt = j.at("split").at("dt").get<double>();
        m.steering_gain = j.at("steering_gain").get<double>();
        m.gain_unit = augment::parse_gain_unit(j.at("steering_gain_unit").get<std::string>());
        m.seed = j.at("seed").get<std::uint64_t>();
        m.generator = j.value("generator", json::object());
        if (j.at("record_bytes").get<std::size_t>() != m.record_bytes()) {
            throw io::FormatError("manifest record size disagrees with its camera/lidar shapes");
        }
    } catch (const json::exception& e) {
        throw io::FormatError(std::string("bad manifest: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw io::FormatError(std::string("bad manifest: ") + e.what());
    }
    return m;
}

std::vector<unsigned char> encode_frame(const Frame& f)
{
    const FrameHeader& h = f.header;
    std::vector<unsigned char> buf;
    buf.reserve(frame_header_bytes + 4 * (f.camera.size() + f.lidar.data.size()));
    io::append_i64(buf, h.step);
    io::append_i64(buf, h.sequence);
    io::append_i64(buf, h.pose);
    for (double v : {h.camera_time, h.lidar_time, h.steering, h.label, h.offset.lateral, h.offset.vertical,
                     h.offset.yaw, h.speed, h.lateral}) {
        io::append_f64(buf, v);
    }
    io::append_i64(buf, h.surface);
    io::append_f32(buf, f.camera.data());
    io::append_f32(buf, f.lidar.data.data());
    return buf;
}

namespace {

FrameHeader decode_header(const unsigned char* p)
{
    FrameHeader h;
    h.step = io::read_i64(p);
    h.sequence = io::read_i64(p + 8);
    h.pose = io::read_i64(p + 16);
    double v[9];
    for (int i = 0; i < 9; ++i) {
        v[i] = io::read_f64(p + 24 + 8 * i);
    }
    h.camera_time = v[0];
    h.lidar_time = v[1];
    h.steering = v[2];
    h.label = v[3];
    h.offset = {v[4], v[5], v[6]};
    h.speed = v[7];
    h.lateral = v[8];
    h.surface = io::read_i64(p + 96);
    return h;
}

void pread_exact(int fd, unsigned char* out, std::size_t n, std::size_t offset, const std::string& what)
{
    while (n > 0) {
        const ssize_t got = ::pread(fd, out, n, static_cast<off_t>(offset));
        if (got < 0 && errno == EINTR) {
            continue;
        }
        if (got <= 0) {
            throw io::FormatError("truncated or unreadable " + what);
        }
        out += got;
        n -= static_cast<std::size_t>(got);
        offset += static_cast<std::size_t>(got);
    }
}

} // namespace

SequenceWriter::SequenceWriter(const std::filesystem::path& root, const std::string& dir, CameraShape camera,
                               lidar::RangeGeometry lidar)
    : camera_(camera), lidar_(lidar)
{
    std::filesystem::create_directories(root / dir);
    path_ = root / dir / "frames.bin";
    file_ = std::fopen(path_.c_str(), "wb");
    if (!file_) {
        throw std::runtime_error("cannot create " + path_.string());
    }
}

SequenceWriter::~SequenceWriter()
{
    if (file_) {
        std::fclose(file_);
    }
}

void SequenceWriter::append(const Frame& f)
{
    if (f.camera.shape() != nn::Shape{3, camera_.rows, camera_.cols} || f.lidar.geometry != lidar_) {
        throw std::invalid_argument("frame " + std::to_string(f.header.step) + " does not match the store shapes");
    }
    const auto buf = encode_frame(f);
    if (std::fwrite(buf.data(), 1, buf.size(), file_) != buf.size()) {
        throw std::runtime_error("write failed: " + path_.string());
    }
    ++count_;
}

void SequenceWriter::close()
{
    if (file_ && std::fclose(file_) != 0) {
        file_ = nullptr;
        throw std::runtime_error("close failed: " + path_.string());
    }
    file_ = nullptr;
}

void write_manifest(const std::filesystem::path& root, const Manifest& m)
{
    std::filesystem::create_directories(root);
    std::ofstream os(root / "manifest.json", std::ios::trunc);
    os << to_json(m).dump(2) << '\n';
    if (!os) {
        throw std::runtime_error("cannot write " + (root / "manifest.json").string());
    }
}

FrameStore::FrameStore(const std::filesystem::path& root) : root_(root)
{
    std::ifstream is(root / "manifest.json");
    if (!is) {
        throw std::runtime_error("no manifest.json in " + root.string());
    }
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw io::FormatError("manifest.json in " + root.string() + " is not valid JSON: " + e.what());
    }
    manifest_ = manifest_from_json(j);
    const std::size_t rec = manifest_.record_bytes();
    for (const SequenceInfo& s : manifest_.sequences) {
        const auto path = root / s.dir / "frames.bin";
        const int fd = ::open(path.c_str(), O_RDONLY);
        if (fd < 0) {
            throw std::runtime_error("cannot open " + path.string());
        }
        fds_.push_back(fd);
        const std::size_t bytes = std::filesystem::file_size(path);
        const std::size_t expected = s.steps * s.poses.size();
        if (bytes != expected * rec) {
            throw io::FormatError(path.string() + " holds " + std::to_string(bytes) + " bytes, expected " +
                                  std::to_string(expected) + " records of " + std::to_string(rec));
        }
        std::vector<FrameHeader> headers(expected);
        unsigned char buf[frame_header_bytes];
        for (std::size_t i = 0; i < expected; ++i) {
            pread_exact(fd, buf, frame_header_bytes, i * rec, "frame " + std::to_string(i) + " of " + s.dir);
            headers[i] = decode_header(buf);
            const FrameHeader& h = headers[i];
            if (h.sequence != s.id || h.pose < 0 || std::size_t(h.pose) >= s.poses.size() ||
                !std::isfinite(h.steering) || !std::isfinite(h.label)) {
                throw io::FormatError("corrupt header in frame " + std::to_string(i) + " of " + s.dir);
            }
        }
        headers_.push_back(std::move(headers));
    }
}

FrameStore::~FrameStore()
{
    for (int fd : fds_) {
        ::close(fd);
    }
}

void FrameStore::read_into(FrameRef r, std::span<float> camera, std::span<float> lidar) const
{
    const std::size_t cam_n = 3 * manifest_.camera.rows * manifest_.camera.cols;
    const std::size_t lid_n = 4 * manifest_.lidar.rows * manifest_.lidar.cols;
    if (camera.size() != cam_n || lidar.size() != lid_n) {
        throw std::invalid_argument("read_into: buffer sizes do not match the store");
    }
    const SequenceInfo& s = manifest_.sequences.at(r.sequence);
    if (r.record >= headers_[r.sequence].size()) {
        throw std::out_of_range("frame " + std::to_string(r.record) + " beyond " + s.dir);
    }
    std::vector<unsigned char> buf(4 * (cam_n + lid_n));
    pread_exact(fds_[r.sequence], buf.data(), buf.size(),
                std::size_t(r.record) * manifest_.record_bytes() + frame_header_bytes,
                "frame " + std::to_string(r.record) + " of " + s.dir);
    io::read_f32(buf.data(), camera);
    io::read_f32(buf.data() + 4 * cam_n, lidar);
    for (float v : camera) {
        if (!std::isfinite(v)) {
            throw io::FormatError("non-finite camera value in frame " + std::to_string(r.record) + " of " + s.dir);
        }
    }
    for (float v : lidar) {
        if (!std::isfinite(v)) {
            throw io::FormatError("non-finite lidar value in frame " + std::to_string(r.record) + " of " + s.dir);
        }
    }
}

Frame FrameStore::read(FrameRef r) const
{
    Frame f;
    f.header = header(r);
    f.camera = nn::Tensor<float>({3, manifest_.camera.rows, manifest_.camera.cols});
    f.lidar = lidar::RangeImage(manifest_.lidar);
    read_into(r, f.camera.data(), f.lidar.data.data());
    return f;
}

Splits make_splits(const FrameStore& store)
{
    Splits out;
    const Manifest& m = store.manifest();
    for (std::size_t s = 0; s < m.sequences.size(); ++s) {
        const bool test = m.sequences[s].role == "test";
        for (std::size_t r = 0; r < store.records(s); ++r) {
            const FrameRef ref{std::uint32_t(s), std::uint32_t(r)};
            const FrameHeader& h = store.header(ref);
            const bool center = h.pose == 0;
            if (test) {
                if (center) {
                    out.test.push_back(ref);
                }
            } else if (in_validation(std::size_t(h.step), m.split)) {
                out.validation_augmented.push_back(ref);
                if (center) {
                    out.validation_center.push_back(ref);
                }
            } else {
                out.train.push_back(ref);
            }
        }
    }
    return out;
}

std::vector<FrameRef> weighted_training_list(const FrameStore& store, const std::vector<FrameRef>& train,
                                             std::size_t* multiplicity)
{
    std::vector<double> labels;
    labels.reserve(train.size());
    for (const FrameRef& r : train) {
        labels.push_back(store.header(r).label);
    }
    const Balance b = balance(labels, store.manifest().balance);
    if (multiplicity) {
        *multiplicity = b.curve_multiplicity;
    }
    std::vector<FrameRef> out;
    out.reserve(b.indices.size());
    for (std::size_t i : b.indices) {
        out.push_back(train[i]);
    }
    return out;
}

void NormAccumulator::add(std::span<const float> camera, std::span<const float> lidar, std::size_t camera_plane,
                          std::size_t lidar_plane)
{
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < camera_plane; ++i) {
            const double v = camera[c * camera_plane + i];
            cam_sum_[c] += v;
            cam_sq_[c] += v * v;
        }
    }
    for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t i = 0; i < lidar_plane; ++i) {
            const double v = lidar[c * lidar_plane + i];
            lid_sum_[c] += v;
            lid_sq_[c] += v * v;
        }
    }
    cam_n_ += double(camera_plane);
    lid_n_ += double(lidar_plane);
}

arch::NormStats NormAccumulator::finish() const
{
    arch::NormStats s;
    auto fill = [](auto& mean, auto& sd, const auto& sum, const auto& sq, double n) {
        for (std::size_t c = 0; c < mean.size(); ++c) {
            if (n == 0.0) {
                continue;
            }
            mean[c] = sum[c] / n;
            const double var = std::max(0.0, sq[c] / n - mean[c] * mean[c]);
            // Constant channels keep unit scale.
            sd[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
        }
    };
    fill(s.camera_mean, s.camera_std, cam_sum_, cam_sq_, cam_n_);
    fill(s.lidar_mean, s.lidar_std, lid_sum_, lid_sq_, lid_n_);
    return s;
}

arch::NormStats compute_norm_stats(const FrameStore& store, const std::vector<FrameRef>& frames)
{
    const Manifest& m = store.manifest();
    const std::size_t cp = m.camera.rows * m.camera.cols, lp = m.lidar.rows * m.lidar.cols;
    std::vector<float> cam(3 * cp), lid(4 * lp);
    NormAccumulator acc;
    for (const FrameRef& r : frames) {
        store.read_into(r, cam, lid);
        acc.add(cam, lid, cp, lp);
    }
    return acc.finish();
}

// ---------------------------------------------------------------------------

BatchIterator::BatchIterator(const FrameStore& store, std::vector<FrameRef> frames, BatchOptions options,
                             std::uint64_t seed, std::uint64_t epoch)
    : store_(store), order_(std::move(frames)), options_(options), seed_(seed), epoch_(epoch)
{
    if (options_.batch_size == 0) {
        throw std::invalid_argument("batch size must be positive");
    }
    if (options_.jitter) {
        options_.jitter_config.validate();
    }
    if (options_.shuffle) {
        Rng rng(derive_seed(seed, {0x73687566, epoch}));
        for (std::size_t i = order_.size(); i > 1; --i) {
            std::swap(order_[i - 1], order_[rng.index(i)]);
        }
    }
}

std::size_t BatchIterator::batch_count() const
{
    return (order_.size() + options_.batch_size - 1) / options_.batch_size;
}

bool BatchIterator::next(Batch& out)
{
    if (position_ >= order_.size()) {
        return false;
    }
    const Manifest& m = store_.manifest();
    const std::size_t n = std::min(options_.batch_size, order_.size() - position_);
    const std::size_t cp = m.camera.rows * m.camera.cols, lp = m.lidar.rows * m.lidar.cols;
    out.camera = nn::Tensor<float>({n, 3, m.camera.rows, m.camera.cols});
    out.lidar = nn::Tensor<float>({n, 4, m.lidar.rows, m.lidar.cols});
    out.labels.assign(n, 0.0f);
    out.refs.assign(order_.begin() + static_cast<std::ptrdiff_t>(position_),
                    order_.begin() + static_cast<std::ptrdiff_t>(position_ + n));
    const std::size_t base = position_;
    const arch::NormStats& norm = options_.norm ? *options_.norm : m.norm;
    std::exception_ptr failure;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        try {
            std::span<float> cam = out.camera.data().subspan(i * 3 * cp, 3 * cp);
            std::span<float> lid = out.lidar.data().subspan(i * 4 * lp, 4 * lp);
            store_.read_into(out.refs[i], cam, lid);
            out.labels[i] = static_cast<float>(store_.header(out.refs[i]).label);
            if (options_.camera && (options_.overexposure != 1.0 || options_.jitter)) {
                nn::Tensor<float> img({3, m.camera.rows, m.camera.cols}, std::vector<float>(cam.begin(), cam.end()));
                if (options_.overexposure != 1.0) {
                    img = augment::overexpose(img, options_.overexposure);
                }
                if (options_.jitter) {
                    Rng rng(derive_seed(seed_, {0x6a6974, epoch_, base + i, 0}));
                    img = augment::jitter_camera(img, options_.jitter_config, rng);
                }
                std::copy(img.data().begin(), img.data().end(), cam.begin());
            }
            if (options_.lidar && options_.jitter) {
                lidar::RangeImage ri(m.lidar);
                std::copy(lid.begin(), lid.end(), ri.data.data().begin());
                Rng rng(derive_seed(seed_, {0x6a6974, epoch_, base + i, 1}));
                ri = augment::jitter_reflectance_rows(ri, options_.jitter_config, rng);
                std::copy(ri.data.data().begin(), ri.data.data().end(), lid.begin());
            }
            arch::normalize_channels<float, 3>(cam, cp, norm.camera_mean, norm.camera_std);
            arch::normalize_channels<float, 4>(lid, lp, norm.lidar_mean, norm.lidar_std);
        } catch (...) {
#pragma omp critical
            if (!failure) {
                failure = std::current_exception();
            }
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    position_ += n;
    return true;
}

} // namespace steerfuse::data
