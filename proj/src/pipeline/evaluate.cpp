#include "steerfuse/pipeline/pipeline.hpp"

#include "steerfuse/util/rng.hpp"
#include "steerfuse/vbp/vbp.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>

namespace steerfuse::pipeline {

using nlohmann::json;

namespace {

constexpr std::uint64_t tag_sim_track = 0x73696d;
constexpr std::uint64_t tag_sim_render = 0x72656e646572;
constexpr std::uint64_t tag_vis_track = 0x766973;
constexpr std::size_t eval_batch = 64;

double label_mean(const arch::LoadedCheckpoint& c) { return c.meta.extra.value("label_mean", 0.0); }
double label_scale(const arch::LoadedCheckpoint& c) { return c.meta.extra.value("label_scale", 1.0); }

std::string factor_key(double f)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, f);
    return std::string(buf, r.ptr);
}

json mean_std(const std::vector<double>& v)
{
    if (v.empty()) {
        return nullptr;
    }
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    double ss = 0.0;
    for (double x : v) {
        ss += (x - mean) * (x - mean);
    }
    return {{"mean", mean}, {"std", v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0}, {"n", v.size()}};
}

arch::LoadedCheckpoint load_or_fail(const fs::path& path)
{
    if (!fs::exists(path)) {
        throw RuntimeFailure("checkpoint not found: " + path.string());
    }
    return arch::load_checkpoint(path);
}

void require_shapes(const arch::LoadedCheckpoint& c, std::size_t cam_rows, std::size_t cam_cols,
                    const lidar::RangeGeometry& lid, const std::string& what)
{
    const arch::Geometry& g = c.meta.geometry;
    if (g.camera.in_h != cam_rows || g.camera.in_w != cam_cols || g.lidar.in_h != lid.rows ||
        g.lidar.in_w != lid.cols) {
        throw RuntimeFailure("checkpoint expects camera " + std::to_string(g.camera.in_h) + "x" +
                             std::to_string(g.camera.in_w) + " and lidar " + std::to_string(g.lidar.in_h) + "x" +
                             std::to_string(g.lidar.in_w) + ", " + what + " provides camera " +
                             std::to_string(cam_rows) + "x" + std::to_string(cam_cols) + " and lidar " +
                             std::to_string(lid.rows) + "x" + std::to_string(lid.cols));
    }
}

lidar::ReflectanceModel checkpoint_reflectance(const arch::LoadedCheckpoint& c, std::size_t rows)
{
    if (!c.meta.extra.contains("reflectance_scales")) {
        return lidar::ReflectanceModel::identity(rows);
    }
    lidar::ReflectanceModel m{c.meta.extra.at("reflectance_scales").get<std::vector<double>>()};
    m.validate(rows);
    return m;
}

struct Normalized {
    nn::Tensor<float> camera;
    nn::Tensor<float> lidar;
};

Normalized normalize_sample(const arch::NormStats& norm, const nn::Tensor<float>& camera,
                            const lidar::RangeImage& range)
{
    Normalized n{camera, range.data};
    arch::normalize_channels<float, 3>(n.camera.data(), camera.size() / 3, norm.camera_mean, norm.camera_std);
    arch::normalize_channels<float, 4>(n.lidar.data(), range.plane(), norm.lidar_mean, norm.lidar_std);
    return n;
}

std::vector<std::string> csv_rows(const sim::RunMetrics& m)
{
    std::vector<std::string> rows;
    rows.reserve(m.trace.size());
    char buf[256];
    for (const sim::TraceRow& r : m.trace) {
        std::snprintf(buf, sizeof buf, "%.3f,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%d", r.time, r.s, r.lateral, r.raw,
                      r.smoothed, r.command, int(r.intervention), int(r.held));
        rows.emplace_back(buf);
    }
    return rows;
}

} // namespace

// ---------------------------------------------------------------------------
// eval

std::vector<double> predict_batch(arch::LoadedCheckpoint& ckpt, const nn::Tensor<float>& camera,
                                  const nn::Tensor<float>& lidar)
{
    const nn::Tensor<float> out = ckpt.network.forward({&camera, &lidar});
    const double mean = label_mean(ckpt), scale = label_scale(ckpt);
    std::vector<double> pred(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        pred[i] = double(out[i]) * scale + mean;
    }
    return pred;
}

double evaluate_frames(arch::LoadedCheckpoint& ckpt, const data::FrameStore& store,
                       const std::vector<data::FrameRef>& frames, double overexposure)
{
    if (frames.empty()) {
        throw RuntimeFailure("cannot evaluate on an empty frame list");
    }
    const data::Manifest& m = store.manifest();
    require_shapes(ckpt, m.camera.rows, m.camera.cols, m.lidar, "the frame store");
    data::BatchOptions opt;
    opt.batch_size = eval_batch;
    opt.shuffle = false;
    opt.overexposure = overexposure;
    opt.norm = ckpt.meta.norm;
    data::BatchIterator it(store, frames, opt, 0, 0);
    data::Batch b;
    std::vector<double> pred, label;
    while (it.next(b)) {
        const std::vector<double> p = predict_batch(ckpt, b.camera, b.lidar);
        pred.insert(pred.end(), p.begin(), p.end());
        label.insert(label.end(), b.labels.begin(), b.labels.end());
    }
    return sim::rmse(pred, label);
}

EvalReport evaluate(const RunConfig& cfg, const fs::path& out, std::ostream& log)
{
    const fs::path data_dir = cfg.eval.data.empty() ? out : fs::path(cfg.eval.data);
    const fs::path ckpt_dir = cfg.eval.checkpoints.empty() ? out : fs::path(cfg.eval.checkpoints);
    if (!fs::exists(data_dir / "manifest.json")) {
        throw RuntimeFailure("no frame store at " + data_dir.string() + " (manifest.json missing)");
    }
    const data::FrameStore store(data_dir);
    const data::Splits splits = data::make_splits(store);
    if (splits.test.empty()) {
        throw RuntimeFailure("frame store at " + data_dir.string() + " has no test frames");
    }
    std::map<std::string, std::vector<data::FrameRef>> sets;
    for (const data::FrameRef& r : splits.test) {
        const data::SequenceInfo& s = store.manifest().sequences[r.sequence];
        sets[s.test_set.empty() ? s.surface : s.test_set].push_back(r);
        sets["all"].push_back(r);
    }

    EvalReport report;
    if (cfg.eval.predictor == "replay") {
        CheckpointEval ce;
        ce.file = "replay";
        for (const auto& [name, frames] : sets) {
            std::vector<double> label;
            for (const data::FrameRef& r : frames) {
                label.push_back(store.header(r).label);
            }
            ce.test_rmse[name] = sim::rmse(label, label);
        }
        report.runs.push_back(ce);
    } else {
        if (!fs::is_directory(ckpt_dir)) {
            throw RuntimeFailure("checkpoint directory not found: " + ckpt_dir.string());
        }
        const std::regex pattern(R"(checkpoint-(camera|lidar|dual|cgdual)-(\d+)\.bin)");
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(ckpt_dir)) {
            if (std::regex_match(entry.path().filename().string(), pattern)) {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            throw RuntimeFailure("no checkpoint-<variant>-<seed>.bin files in " + ckpt_dir.string());
        }
        for (const fs::path& f : files) {
            arch::LoadedCheckpoint ckpt = load_or_fail(f);
            CheckpointEval ce;
            ce.file = f.filename().string();
            ce.variant = ckpt.meta.variant;
            ce.seed = ckpt.meta.seed;
            for (const auto& [name, frames] : sets) {
                ce.test_rmse[name] = evaluate_frames(ckpt, store, frames);
                for (double factor : cfg.eval.overexposure) {
                    ce.overexposed_rmse[factor][name] = evaluate_frames(ckpt, store, frames, factor);
                }
            }
            log << ce.file << ": test RMSE " << ce.test_rmse["all"] << " deg";
            for (double factor : cfg.eval.overexposure) {
                log << ", x" << factor << " exposure " << ce.overexposed_rmse[factor]["all"] << " deg";
            }
            log << "\n";
            report.runs.push_back(std::move(ce));
        }
    }

    json runs = json::array();
    std::map<std::string, std::map<std::string, std::vector<double>>> clean;                   // variant -> set
    std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> dirty; // variant -> factor -> set
    std::map<std::string, std::map<std::string, std::vector<double>>> degradation;             // variant -> factor
    for (const CheckpointEval& ce : report.runs) {
        const std::string v = ce.file == "replay" ? "replay" : std::string(arch::to_string(ce.variant));
        json over = json::object();
        for (const auto& [factor, table] : ce.overexposed_rmse) {
            over[factor_key(factor)] = table;
            for (const auto& [name, value] : table) {
                dirty[v][factor_key(factor)][name].push_back(value);
            }
            degradation[v][factor_key(factor)].push_back(table.at("all") - ce.test_rmse.at("all"));
        }
        for (const auto& [name, value] : ce.test_rmse) {
            clean[v][name].push_back(value);
        }
        json rj = {{"file", ce.file}, {"test_rmse", ce.test_rmse}, {"overexposed_rmse", over}};
        if (ce.file != "replay") {
            rj["variant"] = v;
            rj["seed"] = ce.seed;
        }
        runs.push_back(rj);
    }
    json summary = json::object();
    for (const auto& [v, table] : clean) {
        json sj;
        for (const auto& [name, values] : table) {
            sj["test_rmse"][name] = mean_std(values);
        }
        for (const auto& [factor, t2] : dirty[v]) {
            for (const auto& [name, values] : t2) {
                sj["overexposed_rmse"][factor][name] = mean_std(values);
            }
            sj["degradation"][factor] = mean_std(degradation[v][factor]);
        }
        summary[v] = sj;
    }
    std::map<std::string, std::size_t> set_sizes;
    for (const auto& [name, frames] : sets) {
        set_sizes[name] = frames.size();
    }
    report.metrics = {{"command", "eval"},
                      {"predictor", cfg.eval.predictor},
                      {"test_frames", set_sizes},
                      {"runs", runs},
                      {"summary", summary}};
    write_json(out / "metrics.json", report.metrics);
    return report;
}

// ---------------------------------------------------------------------------
// simulate

sim::Track simulation_track(const RunConfig& cfg)
{
    sim::TrackConfig tc = cfg.sim.track ? *cfg.sim.track : cfg.world.track;
    tc.surface = cfg.sim.surface;
    const double needed = cfg.sim.speed_kmh / 3.6 * cfg.sim.duration + 5.0 + 30.0 + 50.0;
    tc.length = std::max(tc.length, std::ceil(needed));
    return sim::generate_track(tc, derive_seed(cfg.seed, {tag_sim_track}));
}

sim::Policy network_policy(arch::LoadedCheckpoint& ckpt)
{
    return {true, [&ckpt](const sim::Observation& obs) {
                const Normalized n = normalize_sample(ckpt.meta.norm, *obs.camera, *obs.lidar);
                const double out = double(ckpt.network.predict(&n.camera, &n.lidar));
                return out * label_scale(ckpt) + label_mean(ckpt);
            }};
}

SimulateReport simulate(const RunConfig& cfg, const fs::path& out, std::ostream& log)
{
    const sim::Track track = simulation_track(cfg);
    sim::ClosedLoopConfig clc;
    clc.speed = cfg.sim.speed_kmh / 3.6;
    clc.duration = cfg.sim.duration;
    clc.penalty = cfg.sim.penalty;
    clc.merge_window = cfg.sim.merge_window;
    clc.smoother = cfg.sim.smoother;
    clc.vehicle = cfg.world.vehicle;
    clc.camera = camera_for(cfg.world);
    clc.lidar = lidar_for(cfg.world);
    clc.weather.exposure = cfg.sim.exposure;

    std::optional<arch::LoadedCheckpoint> ckpt;
    sim::Policy policy;
    if (cfg.sim.controller == "oracle") {
        policy = sim::centerline_oracle(track, sim::PurePursuit{cfg.data.lookahead, cfg.world.vehicle});
    } else {
        if (cfg.sim.checkpoint.empty()) {
            throw ConfigError("config.sim.checkpoint is required with controller = network");
        }
        ckpt.emplace(load_or_fail(cfg.sim.checkpoint));
        require_shapes(*ckpt, clc.camera.rows, clc.camera.cols, clc.lidar.geometry, "the world config");
        clc.reflectance = checkpoint_reflectance(*ckpt, clc.lidar.geometry.rows);
        if (!cfg.sim.reflectance_from.empty()) {
            const data::FrameStore store(cfg.sim.reflectance_from);
            clc.reflectance = store.manifest().reflectance;
        }
        policy = network_policy(*ckpt);
    }

    SimulateReport report;
    report.run = sim::closed_loop_eval(track, clc, policy, derive_seed(cfg.seed, {tag_sim_render}));
    const sim::InterventionSummary& s = report.run.summary;

    fs::create_directories(out);
    {
        const fs::path tmp = out / "trace.csv.partial";
        std::ofstream os(tmp, std::ios::trunc);
        os << "time,s,lateral,raw,smoothed,command,intervention,held\n";
        for (const std::string& row : csv_rows(report.run)) {
            os << row << '\n';
        }
        if (!os) {
            throw RuntimeFailure("write failed: " + tmp.string());
        }
        os.close();
        fs::rename(tmp, out / "trace.csv");
    }
    std::size_t held = 0;
    for (const sim::TraceRow& r : report.run.trace) {
        held += r.held ? 1 : 0;
    }
    report.metrics = {{"command", "simulate"},
                      {"controller", cfg.sim.controller},
                      {"checkpoint", cfg.sim.checkpoint.empty() ? "" : fs::path(cfg.sim.checkpoint).filename().string()},
                      {"seed", cfg.seed},
                      {"surface", std::string(sim::to_string(cfg.sim.surface))},
                      {"speed_kmh", cfg.sim.speed_kmh},
                      {"track_length", track.length()},
                      {"autonomy", s.autonomy()},
                      {"interventions", s.interventions},
                      {"events", s.events},
                      {"operation_time", s.operation_time},
                      {"autonomous_time", s.autonomous_time},
                      {"penalty", cfg.sim.penalty},
                      {"event_times", report.run.event_times},
                      {"lateral_rms", report.run.lateral_rms},
                      {"frames", report.run.trace.size()},
                      {"held_frames", held}};
    write_json(out / "metrics.json", report.metrics);
    log << "simulate (" << cfg.sim.controller << "): autonomy " << 100.0 * s.autonomy() << "%, "
        << s.interventions << " interventions (" << s.events << " departures) over " << s.autonomous_time
        << " s autonomous, lateral RMS " << report.run.lateral_rms << " m\n";
    return report;
}

// ---------------------------------------------------------------------------
// visualize

VisualizeReport visualize(const RunConfig& cfg, const fs::path& out, std::ostream& log)
{
    if (cfg.visualize.checkpoint.empty()) {
        throw ConfigError("config.visualize.checkpoint is required");
    }
    arch::LoadedCheckpoint ckpt = load_or_fail(cfg.visualize.checkpoint);
    const sim::CameraConfig cam = camera_for(cfg.world);
    const sim::LidarConfig lid = lidar_for(cfg.world);
    require_shapes(ckpt, cam.rows, cam.cols, lid.geometry, "the world config");
    const lidar::ReflectanceModel reflectance = checkpoint_reflectance(ckpt, lid.geometry.rows);

    sim::TrackConfig tc = cfg.world.track;
    tc.kind = sim::CurvatureKind::straight;
    tc.surface = cfg.visualize.surface;
    tc.length = std::max(tc.length, 20.0 + cfg.visualize.spacing * double(cfg.visualize.frames) + 150.0);
    const sim::Track track = sim::generate_track(tc, derive_seed(cfg.seed, {tag_vis_track}));

    fs::create_directories(out);
    VisualizeReport report;
    json frames = json::array();
    double line_sum = 0.0, off_sum = 0.0;
    std::size_t line_n = 0, off_n = 0;
    for (std::size_t i = 0; i < cfg.visualize.frames; ++i) {
        const sim::CenterPose c = sim::centerline_at(track, 20.0 + cfg.visualize.spacing * double(i));
        const sim::SensorPose pose{c.x, c.y, c.heading, {}};
        const nn::Tensor<float> camera =
            sim::render_camera(track, pose, cam, {}, derive_seed(cfg.seed, {tag_vis_track, i, 1}));
        const lidar::RangeImage range =
            lidar::project(sim::render_lidar(track, pose, lid, derive_seed(cfg.seed, {tag_vis_track, i, 2})).scan,
                           reflectance, lid.geometry)
                .image;
        const Normalized n = normalize_sample(ckpt.meta.norm, camera, range);
        for (arch::Modality mod : {arch::Modality::camera, arch::Modality::lidar}) {
            if (!arch::uses(ckpt.meta.variant, mod)) {
                continue;
            }
            const vbp::SaliencyMask mask = vbp::visual_backprop(ckpt.network, &n.camera, &n.lidar, mod);
            const float peak = *std::max_element(mask.values.data().begin(), mask.values.data().end());
            nn::Tensor<float> raw = mask.values;
            if (peak > 0.0f) {
                for (float& v : raw.data()) {
                    v /= peak;
                }
            }
            const nn::Tensor<float> display = vbp::log_scale(mask.values);
            const vbp::RgbImage overlay = mod == arch::Modality::camera
                                              ? vbp::overlay_camera(display, camera, vbp::cyan, cfg.visualize.max_alpha)
                                              : vbp::overlay_lidar(display, range.data, vbp::cyan, cfg.visualize.max_alpha);
            const std::string stem = "mask-" + std::string(arch::to_string(mod)) + "-" + std::to_string(i);
            MaskStats ms;
            ms.modality = mod;
            ms.frame = i;
            ms.files.push_back(vbp::write_image(out / (stem + "-raw.png"), vbp::gray(raw)));
            ms.files.push_back(vbp::write_image(out / (stem + "-display.png"), vbp::gray(display)));
            ms.files.push_back(vbp::write_image(out / (stem + "-overlay.png"), overlay));
            json fj = {{"frame", i}, {"modality", std::string(arch::to_string(mod))}, {"peak", peak}};
            if (mod == arch::Modality::camera) {
                const std::vector<sim::PixelClass> classes = sim::camera_pixel_classes(track, pose, cam);
                double ls = 0.0, os = 0.0;
                for (std::size_t p = 0; p < classes.size(); ++p) {
                    const double v = mask.values[p];
                    if (classes[p] == sim::PixelClass::lane_line) {
                        ls += v;
                        ++ms.lane_line_pixels;
                    } else if (classes[p] == sim::PixelClass::offroad) {
                        os += v;
                        ++ms.offroad_pixels;
                    }
                }
                ms.lane_line_mean = ms.lane_line_pixels ? ls / double(ms.lane_line_pixels) : 0.0;
                ms.offroad_mean = ms.offroad_pixels ? os / double(ms.offroad_pixels) : 0.0;
                line_sum += ls;
                off_sum += os;
                line_n += ms.lane_line_pixels;
                off_n += ms.offroad_pixels;
                fj["lane_line_mean"] = ms.lane_line_mean;
                fj["offroad_mean"] = ms.offroad_mean;
                fj["lane_line_pixels"] = ms.lane_line_pixels;
                fj["offroad_pixels"] = ms.offroad_pixels;
            }
            json files = json::array();
            for (const fs::path& f : ms.files) {
                files.push_back(f.filename().string());
            }
            fj["files"] = files;
            frames.push_back(fj);
            report.masks.push_back(std::move(ms));
        }
    }
    report.metrics = {{"command", "visualize"},
                      {"checkpoint", fs::path(cfg.visualize.checkpoint).filename().string()},
                      {"variant", std::string(arch::to_string(ckpt.meta.variant))},
                      {"surface", std::string(sim::to_string(cfg.visualize.surface))},
                      {"frames", frames}};
    if (line_n > 0 && off_n > 0) {
        report.metrics["camera_lane_line_mean"] = line_sum / double(line_n);
        report.metrics["camera_offroad_mean"] = off_sum / double(off_n);
        log << "visualize: camera mask mean on lane lines " << line_sum / double(line_n) << ", off-road "
            << off_sum / double(off_n) << "\n";
    }
    write_json(out / "metrics.json", report.metrics);
    log << "visualize: wrote " << 3 * report.masks.size() << " images to " << out.string() << "\n";
    return report;
}

} // namespace steerfuse::pipeline
