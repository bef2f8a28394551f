#include "steerfuse/pipeline/pipeline.hpp"

#include "steerfuse/util/rng.hpp"

#include <fstream>

namespace steerfuse::pipeline {

using nlohmann::json;

void write_json(const fs::path& path, const json& j)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".partial";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) {
            throw RuntimeFailure("cannot write " + tmp.string());
        }
        os << j.dump(2) << '\n';
        if (!os) {
            throw RuntimeFailure("write failed: " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

namespace {

struct Planned {
    SequenceSpec spec;
    std::string role;
    std::int64_t id = 0;
    std::uint64_t seed = 0;
    double speed = 0.0; // m/s
    sim::Track track;
    std::vector<sim::DriveSample> drive;
    std::vector<double> labels;
    std::vector<augment::PoseOffset> poses;
};

// Derivation tags keep the per-sequence streams apart.
constexpr std::uint64_t tag_track = 1;
constexpr std::uint64_t tag_speed = 2;
constexpr std::uint64_t tag_camera = 1;
constexpr std::uint64_t tag_lidar = 2;

constexpr std::size_t render_chunk = 32;

} // namespace

sim::Track sequence_track(const RunConfig& cfg, const SequenceSpec& spec, std::uint64_t seed, double speed)
{
    sim::TrackConfig tc = spec.track ? *spec.track : cfg.world.track;
    tc.surface = spec.surface;
    const double needed = double(spec.frames + cfg.data.label_lead) * 0.1 * speed + 5.0 + 30.0 + 20.0;
    tc.length = std::max(tc.length, std::ceil(needed));
    return sim::generate_track(tc, seed);
}

GenDataReport gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& log)
{
    const sim::CameraConfig cam = camera_for(cfg.world);
    const sim::LidarConfig lid = lidar_for(cfg.world);
    const double gain = augment::gain_deg_per_m(cfg.data.steering_correction_gain, cfg.data.steering_correction_unit);

    std::vector<Planned> plan;
    auto add = [&](const std::vector<SequenceSpec>& specs, const std::string& role) {
        for (const SequenceSpec& spec : specs) {
            for (std::size_t c = 0; c < spec.count; ++c) {
                Planned p;
                p.spec = spec;
                p.role = role;
                p.id = std::int64_t(plan.size());
                p.seed = derive_seed(cfg.seed, {tag_track, std::uint64_t(p.id)});
                Rng rng(derive_seed(cfg.seed, {tag_speed, std::uint64_t(p.id)}));
                p.speed = rng.uniform(cfg.data.speed_kmh[0], cfg.data.speed_kmh[1]) / 3.6;
                if (role == "train") {
                    p.poses = cfg.data.poses;
                } else {
                    p.poses = {augment::PoseOffset{}};
                }
                plan.push_back(std::move(p));
            }
        }
    };
    add(cfg.data.train, "train");
    add(cfg.data.test, "test");
    if (plan.empty()) {
        log << "warning: no sequences configured; writing an empty frame store\n";
    }

    // Expert drives first: they are cheap, and infeasible tracks fail before any output.
    for (Planned& p : plan) {
        p.track = sequence_track(cfg, p.spec, p.seed, p.speed);
        sim::ExpertConfig ec;
        ec.speed = p.speed;
        ec.max_frames = p.spec.frames + cfg.data.label_lead;
        ec.controller.lookahead = cfg.data.lookahead;
        ec.controller.vehicle = cfg.world.vehicle;
        ec.wander_sigma = cfg.data.wander_sigma;
        p.drive = sim::expert_drive(p.track, ec, p.seed);
        std::vector<double> steering;
        steering.reserve(p.drive.size());
        for (const sim::DriveSample& d : p.drive) {
            steering.push_back(d.state.steering_wheel_deg);
        }
        if (steering.size() < cfg.data.label_lead + 1) {
            throw sim::TrackInfeasible("sequence " + std::to_string(p.id) + " is too short to label");
        }
        p.labels = data::assign_labels(steering, cfg.data.label_lead);
    }

    // Reflectance calibration on center scans of the train sequences.
    std::vector<lidar::LidarScan> scans;
    std::vector<std::vector<bool>> masks;
    for (const Planned& p : plan) {
        if (p.role != "train") {
            continue;
        }
        for (std::size_t k = 0; k < p.labels.size(); k += cfg.data.calibration_stride) {
            const sim::VehicleState& s = p.drive[k].state;
            sim::LidarRender r = sim::render_lidar(p.track, {s.x, s.y, s.heading, {}}, lid,
                                                   derive_seed(p.seed, {k, tag_lidar}));
            scans.push_back(std::move(r.scan));
            masks.push_back(std::move(r.road));
        }
    }
    lidar::ReflectanceModel reflectance = lidar::ReflectanceModel::identity(lid.geometry.rows);
    if (!scans.empty()) {
        reflectance = lidar::fit_reflectance_model(scans, masks, lid.geometry);
    }
    scans.clear();
    masks.clear();

    data::Manifest manifest;
    manifest.camera = {cam.rows, cam.cols};
    manifest.lidar = lid.geometry;
    manifest.reflectance = reflectance;
    manifest.balance = cfg.data.balance;
    manifest.split = cfg.data.split;
    manifest.steering_gain = cfg.data.steering_correction_gain;
    manifest.gain_unit = cfg.data.steering_correction_unit;
    manifest.seed = cfg.seed;
    {
        const json full = to_json(cfg);
        manifest.generator = {{"world", full.at("world")}, {"data", full.at("data")}};
    }

    GenDataReport report;
    data::NormAccumulator norm;
    const std::size_t cp = cam.rows * cam.cols, lp = lid.geometry.rows * lid.geometry.cols;
    for (const Planned& p : plan) {
        char dir[32];
        std::snprintf(dir, sizeof dir, "seq-%04lld", static_cast<long long>(p.id));
        data::SequenceWriter writer(out, dir, manifest.camera, manifest.lidar);
        const sim::Weather weather{p.spec.exposure};
        const std::int64_t surface = sim::surface_code(p.spec.surface);
        const std::size_t steps = p.labels.size();
        std::vector<data::Frame> chunk;
        for (std::size_t begin = 0; begin < steps; begin += render_chunk) {
            const std::size_t n = std::min(render_chunk, steps - begin);
            chunk.assign(n * p.poses.size(), data::Frame{});
            std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
            for (std::size_t i = 0; i < n; ++i) {
                try {
                    const std::size_t k = begin + i;
                    const sim::DriveSample& d = p.drive[k];
                    const sim::VehicleState& s = d.state;
                    const lidar::RangeImage center =
                        lidar::project(sim::render_lidar(p.track, {s.x, s.y, s.heading, {}}, lid,
                                                         derive_seed(p.seed, {k, tag_lidar}))
                                           .scan,
                                       reflectance, lid.geometry)
                            .image;
                    for (std::size_t q = 0; q < p.poses.size(); ++q) {
                        const augment::PoseOffset& off = p.poses[q];
                        data::Frame& f = chunk[i * p.poses.size() + q];
                        f.header.step = std::int64_t(k);
                        f.header.sequence = p.id;
                        f.header.pose = std::int64_t(q);
                        f.header.camera_time = d.time;
                        f.header.lidar_time = d.time;
                        f.header.steering = s.steering_wheel_deg;
                        f.header.label = augment::correct_steering(p.labels[k], off.lateral, gain);
                        f.header.offset = off;
                        f.header.speed = s.speed;
                        f.header.lateral = d.where.lateral;
                        f.header.surface = surface;
                        f.camera = sim::render_camera(p.track, {s.x, s.y, s.heading, off}, cam, weather,
                                                      derive_seed(p.seed, {k, tag_camera, q}));
                        f.lidar = q == 0 ? center : augment::augment_lidar(center, off);
                    }
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
            for (const data::Frame& f : chunk) {
                writer.append(f);
                if (p.role == "train" && !data::in_validation(std::size_t(f.header.step), cfg.data.split)) {
                    norm.add(f.camera.data(), f.lidar.data.data(), cp, lp);
                }
            }
        }
        writer.close();

        data::SequenceInfo info;
        info.id = p.id;
        info.dir = dir;
        info.role = p.role;
        info.surface = std::string(sim::to_string(p.spec.surface));
        info.track_seed = p.seed;
        info.speed = p.speed;
        info.exposure = p.spec.exposure;
        info.steps = steps;
        info.poses = p.poses;
        info.test_set = p.role == "test" ? p.spec.name : "";
        manifest.sequences.push_back(info);

        ++report.sequences;
        report.records += writer.count();
        report.center_frames_per_surface[info.surface] += steps;
        report.records_per_surface[info.surface] += writer.count();
        log << "  " << dir << " " << p.role << " " << info.surface << " " << steps << " steps x " << p.poses.size()
            << " poses at " << p.speed * 3.6 << " km/h\n";
    }
    manifest.norm = norm.finish();
    data::write_manifest(out, manifest);

    for (const auto& [surface, n] : report.center_frames_per_surface) {
        log << surface << ": " << n << " center frames, " << report.records_per_surface[surface] << " records\n";
    }
    log << "total: " << report.sequences << " sequences, " << report.records << " records\n";
    return report;
}

} // namespace steerfuse::pipeline
