#include "steerfuse/pipeline/config.hpp"

#include <fstream>
#include <set>

namespace steerfuse::pipeline {

using nlohmann::json;

std::string_view to_string(Resolution r) { return r == Resolution::full ? "full" : "half"; }

namespace {

/// Tracks consumed keys so leftovers can be reported as unknown.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        used_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + " has the wrong type (got " + std::string(j_.at(key).type_name()) +
                              ")");
        }
    }

    const json* child(const char* key)
    {
        used_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string sub(const char* key) const { return path_ + "." + key; }

    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (!used_.count(k)) {
                throw ConfigError("unknown key " + path_ + "." + k);
            }
        }
    }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

template <typename F>
auto wrap(const std::string& path, F&& f)
{
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

sim::Surface read_surface(Reader& r, const char* key, sim::Surface def)
{
    std::string s(sim::to_string(def));
    r.get(key, s);
    return wrap(r.sub(key), [&] { return sim::parse_surface(s); });
}

sim::TrackConfig read_track(const json& j, const std::string& path, sim::TrackConfig t)
{
    Reader r(j, path);
    std::string kind(sim::to_string(t.kind));
    r.get("kind", kind);
    t.kind = wrap(r.sub("kind"), [&] { return sim::parse_curvature_kind(kind); });
    r.get("length", t.length);
    r.get("lane_width", t.lane_width);
    r.get("shoulder", t.shoulder);
    r.get("max_curvature", t.max_curvature);
    r.get("arc_radius", t.arc_radius);
    r.get("components", t.components);
    r.get("min_wavelength", t.min_wavelength);
    r.get("max_wavelength", t.max_wavelength);
    r.get("flat_terrain", t.flat_terrain);
    r.get("post_spacing", t.post_spacing);
    r.get("post_offset", t.post_offset);
    r.get("sample_spacing", t.sample_spacing);
    r.finish();
    try {
        t.validate();
    } catch (const sim::TrackInfeasible& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return t;
}

json track_json(const sim::TrackConfig& t)
{
    return {{"kind", std::string(sim::to_string(t.kind))},
            {"length", t.length},
            {"lane_width", t.lane_width},
            {"shoulder", t.shoulder},
            {"max_curvature", t.max_curvature},
            {"arc_radius", t.arc_radius},
            {"components", t.components},
            {"min_wavelength", t.min_wavelength},
            {"max_wavelength", t.max_wavelength},
            {"flat_terrain", t.flat_terrain},
            {"post_spacing", t.post_spacing},
            {"post_offset", t.post_offset},
            {"sample_spacing", t.sample_spacing}};
}

std::vector<SequenceSpec> read_sequences(const json* j, const std::string& path, const sim::TrackConfig& base)
{
    std::vector<SequenceSpec> out;
    if (!j) {
        return out;
    }
    if (!j->is_array()) {
        throw ConfigError(path + " must be an array");
    }
    for (std::size_t i = 0; i < j->size(); ++i) {
        const std::string p = path + "[" + std::to_string(i) + "]";
        Reader r((*j)[i], p);
        SequenceSpec s;
        r.get("name", s.name);
        s.surface = read_surface(r, "surface", s.surface);
        r.get("count", s.count);
        r.get("frames", s.frames);
        r.get("exposure", s.exposure);
        if (const json* t = r.child("track")) {
            s.track = read_track(*t, r.sub("track"), base);
        }
        r.finish();
        if (s.name.empty()) {
            s.name = std::string(sim::to_string(s.surface));
        }
        if (s.frames < 1) {
            throw ConfigError(p + ".frames must be at least 1");
        }
        if (!(s.exposure > 0.0)) {
            throw ConfigError(p + ".exposure must be positive");
        }
        out.push_back(s);
    }
    return out;
}

json sequences_json(const std::vector<SequenceSpec>& v)
{
    json out = json::array();
    for (const SequenceSpec& s : v) {
        json j = {{"name", s.name},
                  {"surface", std::string(sim::to_string(s.surface))},
                  {"count", s.count},
                  {"frames", s.frames},
                  {"exposure", s.exposure}};
        if (s.track) {
            j["track"] = track_json(*s.track);
        }
        out.push_back(j);
    }
    return out;
}

std::array<double, 2> read_range(Reader& r, const char* key, std::array<double, 2> v)
{
    r.get(key, v);
    if (!(v[0] <= v[1])) {
        throw ConfigError(r.sub(key) + " must be [low, high] with low <= high");
    }
    return v;
}

} // namespace

sim::CameraConfig camera_for(const WorldConfig& w)
{
    sim::CameraConfig c = w.camera;
    if (w.resolution == Resolution::full) {
        c.rows = 63;
        c.cols = 306;
        c.horizon_offset_rows = w.camera.horizon_offset_rows;
    } else {
        c.rows = 32;
        c.cols = 153;
        c.horizon_offset_rows = 0.5 * w.camera.horizon_offset_rows;
    }
    return c;
}

sim::LidarConfig lidar_for(const WorldConfig& w)
{
    sim::LidarConfig l = w.lidar;
    l.geometry = lidar::RangeGeometry::with_columns(w.resolution == Resolution::full ? 310 : 155);
    return l;
}

arch::Geometry geometry_for(Resolution r)
{
    return r == Resolution::full ? arch::full_resolution_geometry() : arch::half_resolution_geometry();
}

RunConfig parse_config(const json& j)
{
    RunConfig c;
    Reader root(j, "config");
    root.get("seed", c.seed);
    root.get("output", c.output);

    if (const json* w = root.child("world")) {
        Reader r(*w, "config.world");
        std::string res(to_string(c.world.resolution));
        r.get("resolution", res);
        if (res == "full") {
            c.world.resolution = Resolution::full;
        } else if (res == "half") {
            c.world.resolution = Resolution::half;
        } else {
            throw ConfigError("config.world.resolution must be full or half");
        }
        if (const json* cam = r.child("camera")) {
            Reader cr(*cam, "config.world.camera");
            cr.get("height", c.world.camera.height);
            cr.get("horizontal_fov_deg", c.world.camera.horizontal_fov_deg);
            cr.get("horizon_offset_rows", c.world.camera.horizon_offset_rows);
            cr.get("pixel_noise", c.world.camera.pixel_noise);
            cr.get("texture_noise", c.world.camera.texture_noise);
            cr.finish();
            if (!(c.world.camera.height > 0.0) || !(c.world.camera.horizontal_fov_deg > 0.0) ||
                !(c.world.camera.horizontal_fov_deg < 170.0)) {
                throw ConfigError("config.world.camera needs height > 0 and 0 < horizontal_fov_deg < 170");
            }
        }
        if (const json* lid = r.child("lidar")) {
            Reader lr(*lid, "config.world.lidar");
            lr.get("height", c.world.lidar.height);
            lr.get("dropout", c.world.lidar.dropout);
            lr.get("max_range", c.world.lidar.max_range);
            lr.get("reflectance_noise", c.world.lidar.reflectance_noise);
            lr.get("sensor_seed", c.world.lidar.sensor_seed);
            lr.finish();
            if (!(c.world.lidar.height > 0.0) || !(c.world.lidar.dropout >= 0.0 && c.world.lidar.dropout <= 1.0) ||
                !(c.world.lidar.max_range > 0.0)) {
                throw ConfigError("config.world.lidar needs height > 0, dropout in [0, 1] and max_range > 0");
            }
        }
        if (const json* v = r.child("vehicle")) {
            Reader vr(*v, "config.world.vehicle");
            vr.get("wheelbase", c.world.vehicle.wheelbase);
            vr.get("steering_ratio", c.world.vehicle.steering_ratio);
            vr.get("max_wheel_deg", c.world.vehicle.max_wheel_deg);
            vr.finish();
            if (!(c.world.vehicle.wheelbase > 0.0) || !(c.world.vehicle.steering_ratio > 0.0) ||
                !(c.world.vehicle.max_wheel_deg > 0.0)) {
                throw ConfigError("config.world.vehicle values must be positive");
            }
        }
        if (const json* t = r.child("track")) {
            c.world.track = read_track(*t, "config.world.track", c.world.track);
        }
        r.finish();
    }

    if (const json* d = root.child("data")) {
        Reader r(*d, "config.data");
        c.data.train = read_sequences(r.child("train"), "config.data.train", c.world.track);
        c.data.test = read_sequences(r.child("test"), "config.data.test", c.world.track);
        c.data.speed_kmh = read_range(r, "speed_kmh", c.data.speed_kmh);
        if (const json* p = r.child("poses")) {
            c.data.poses.clear();
            try {
                for (const auto& v : p->get<std::vector<std::array<double, 3>>>()) {
                    c.data.poses.push_back({v[0], v[1], v[2]});
                }
            } catch (const json::exception&) {
                throw ConfigError("config.data.poses must be a list of [lateral, vertical, yaw]");
            }
        }
        if (c.data.poses.empty() || !(c.data.poses[0] == augment::PoseOffset{})) {
            throw ConfigError("config.data.poses must start with the center pose [0, 0, 0]");
        }
        for (const auto& p : c.data.poses) {
            wrap("config.data.poses", [&] { p.validate(); return 0; });
        }
        r.get("steering_correction_gain", c.data.steering_correction_gain);
        std::string unit(augment::to_string(c.data.steering_correction_unit));
        r.get("steering_correction_unit", unit);
        c.data.steering_correction_unit =
            wrap("config.data.steering_correction_unit", [&] { return augment::parse_gain_unit(unit); });
        r.get("lookahead", c.data.lookahead);
        r.get("wander_sigma", c.data.wander_sigma);
        r.get("label_lead", c.data.label_lead);
        r.get("calibration_stride", c.data.calibration_stride);
        if (const json* b = r.child("balance")) {
            Reader br(*b, "config.data.balance");
            br.get("threshold", c.data.balance.threshold);
            br.get("max_multiplicity", c.data.balance.max_multiplicity);
            br.finish();
        }
        if (const json* s = r.child("split")) {
            Reader sr(*s, "config.data.split");
            sr.get("window", c.data.split.window);
            sr.get("period", c.data.split.period);
            sr.finish();
        }
        r.finish();
        wrap("config.data.balance", [&] { c.data.balance.validate(); return 0; });
        wrap("config.data.split", [&] { c.data.split.validate(); return 0; });
        if (!(c.data.speed_kmh[0] > 0.0) || !(c.data.lookahead > 0.0) || !(c.data.wander_sigma >= 0.0) ||
            c.data.calibration_stride < 1 || c.data.label_lead < 1) {
            throw ConfigError("config.data needs positive speeds and lookahead, wander_sigma >= 0, "
                              "calibration_stride >= 1 and label_lead >= 1");
        }
    }

    if (const json* t = root.child("train")) {
        Reader r(*t, "config.train");
        if (const json* v = r.child("variants")) {
            c.train.variants.clear();
            try {
                for (const auto& id : v->get<std::vector<std::string>>()) {
                    c.train.variants.push_back(
                        wrap("config.train.variants", [&] { return arch::parse_variant(id); }));
                }
            } catch (const json::exception&) {
                throw ConfigError("config.train.variants must be a list of strings");
            }
        }
        r.get("epochs", c.train.epochs);
        r.get("lr", c.train.lr);
        r.get("batch_size", c.train.batch_size);
        r.get("seeds", c.train.seeds);
        r.get("jitter", c.train.jitter);
        r.get("data", c.train.data);
        if (const json* jc = r.child("jitter_config")) {
            Reader jr(*jc, "config.train.jitter_config");
            jr.get("hue_deg", c.train.jitter_config.hue_deg);
            jr.get("gamma", c.train.jitter_config.gamma);
            jr.get("saturation", c.train.jitter_config.saturation);
            jr.get("reflectance", c.train.jitter_config.reflectance);
            jr.finish();
            wrap("config.train.jitter_config", [&] { c.train.jitter_config.validate(); return 0; });
        }
        r.finish();
        if (c.train.epochs < 1 || !(c.train.lr > 0.0) || c.train.batch_size < 1 || c.train.seeds < 1 ||
            c.train.variants.empty()) {
            throw ConfigError("config.train needs epochs, lr, batch_size, seeds >= 1 and at least one variant");
        }
    }

    if (const json* e = root.child("eval")) {
        Reader r(*e, "config.eval");
        r.get("data", c.eval.data);
        r.get("checkpoints", c.eval.checkpoints);
        r.get("overexposure", c.eval.overexposure);
        r.get("predictor", c.eval.predictor);
        r.finish();
        if (c.eval.predictor != "network" && c.eval.predictor != "replay") {
            throw ConfigError("config.eval.predictor must be network or replay");
        }
        for (double f : c.eval.overexposure) {
            if (!(f > 0.0)) {
                throw ConfigError("config.eval.overexposure factors must be positive");
            }
        }
    }

    if (const json* s = root.child("sim")) {
        Reader r(*s, "config.sim");
        r.get("checkpoint", c.sim.checkpoint);
        r.get("controller", c.sim.controller);
        if (c.sim.controller != "network" && c.sim.controller != "oracle") {
            throw ConfigError("config.sim.controller must be network or oracle");
        }
        c.sim.surface = read_surface(r, "surface", c.sim.surface);
        if (const json* t = r.child("track")) {
            c.sim.track = read_track(*t, "config.sim.track", c.world.track);
        }
        r.get("speed_kmh", c.sim.speed_kmh);
        r.get("duration", c.sim.duration);
        r.get("exposure", c.sim.exposure);
        r.get("penalty", c.sim.penalty);
        r.get("merge_window", c.sim.merge_window);
        r.get("reflectance_from", c.sim.reflectance_from);
        if (const json* sm = r.child("smoother")) {
            Reader sr(*sm, "config.sim.smoother");
            sr.get("decay", c.sim.smoother.decay);
            sr.get("weight_on_current", c.sim.smoother.weight_on_current);
            sr.get("max_delta", c.sim.smoother.max_delta);
            sr.get("clamp", c.sim.smoother.clamp);
            sr.finish();
            wrap("config.sim.smoother", [&] { c.sim.smoother.validate(); return 0; });
        }
        r.finish();
        if (!(c.sim.speed_kmh > 0.0) || !(c.sim.duration > 0.0) || !(c.sim.exposure > 0.0) ||
            !(c.sim.penalty >= 0.0) || !(c.sim.merge_window >= 0.0)) {
            throw ConfigError("config.sim needs positive speed, duration and exposure, non-negative penalty and "
                              "merge_window");
        }
    }

    if (const json* v = root.child("visualize")) {
        Reader r(*v, "config.visualize");
        r.get("checkpoint", c.visualize.checkpoint);
        c.visualize.surface = read_surface(r, "surface", c.visualize.surface);
        r.get("frames", c.visualize.frames);
        r.get("spacing", c.visualize.spacing);
        r.get("max_alpha", c.visualize.max_alpha);
        r.finish();
        if (!(c.visualize.spacing > 0.0) || !(c.visualize.max_alpha >= 0.0f && c.visualize.max_alpha <= 1.0f)) {
            throw ConfigError("config.visualize needs spacing > 0 and max_alpha in [0, 1]");
        }
    }
    root.finish();
    return c;
}

RunConfig load_config(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot read config file " + path.string());
    }
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

json to_json(const RunConfig& c)
{
    json poses = json::array();
    for (const auto& p : c.data.poses) {
        poses.push_back({p.lateral, p.vertical, p.yaw});
    }
    json variants = json::array();
    for (arch::Variant v : c.train.variants) {
        variants.push_back(std::string(arch::to_string(v)));
    }
    json sim = {{"checkpoint", c.sim.checkpoint},
                {"controller", c.sim.controller},
                {"surface", std::string(sim::to_string(c.sim.surface))},
                {"speed_kmh", c.sim.speed_kmh},
                {"duration", c.sim.duration},
                {"exposure", c.sim.exposure},
                {"penalty", c.sim.penalty},
                {"merge_window", c.sim.merge_window},
                {"reflectance_from", c.sim.reflectance_from},
                {"smoother",
                 {{"decay", c.sim.smoother.decay},
                  {"weight_on_current", c.sim.smoother.weight_on_current},
                  {"max_delta", c.sim.smoother.max_delta},
                  {"clamp", c.sim.smoother.clamp}}}};
    if (c.sim.track) {
        sim["track"] = track_json(*c.sim.track);
    }
    return {{"seed", c.seed},
            {"output", c.output},
            {"world",
             {{"resolution", std::string(to_string(c.world.resolution))},
              {"camera",
               {{"height", c.world.camera.height},
                {"horizontal_fov_deg", c.world.camera.horizontal_fov_deg},
                {"horizon_offset_rows", c.world.camera.horizon_offset_rows},
                {"pixel_noise", c.world.camera.pixel_noise},
                {"texture_noise", c.world.camera.texture_noise}}},
              {"lidar",
               {{"height", c.world.lidar.height},
                {"dropout", c.world.lidar.dropout},
                {"max_range", c.world.lidar.max_range},
                {"reflectance_noise", c.world.lidar.reflectance_noise},
                {"sensor_seed", c.world.lidar.sensor_seed}}},
              {"vehicle",
               {{"wheelbase", c.world.vehicle.wheelbase},
                {"steering_ratio", c.world.vehicle.steering_ratio},
                {"max_wheel_deg", c.world.vehicle.max_wheel_deg}}},
              {"track", track_json(c.world.track)}}},
            {"data",
             {{"train", sequences_json(c.data.train)},
              {"test", sequences_json(c.data.test)},
              {"speed_kmh", c.data.speed_kmh},
              {"poses", poses},
              {"steering_correction_gain", c.data.steering_correction_gain},
              {"steering_correction_unit", std::string(augment::to_string(c.data.steering_correction_unit))},
              {"lookahead", c.data.lookahead},
              {"wander_sigma", c.data.wander_sigma},
              {"label_lead", c.data.label_lead},
              {"calibration_stride", c.data.calibration_stride},
              {"balance", {{"threshold", c.data.balance.threshold}, {"max_multiplicity", c.data.balance.max_multiplicity}}},
              {"split", {{"window", c.data.split.window}, {"period", c.data.split.period}}}}},
            {"train",
             {{"variants", variants},
              {"epochs", c.train.epochs},
              {"lr", c.train.lr},
              {"batch_size", c.train.batch_size},
              {"seeds", c.train.seeds},
              {"jitter", c.train.jitter},
              {"data", c.train.data},
              {"jitter_config",
               {{"hue_deg", c.train.jitter_config.hue_deg},
                {"gamma", c.train.jitter_config.gamma},
                {"saturation", c.train.jitter_config.saturation},
                {"reflectance", c.train.jitter_config.reflectance}}}}},
            {"eval",
             {{"data", c.eval.data},
              {"checkpoints", c.eval.checkpoints},
              {"overexposure", c.eval.overexposure},
              {"predictor", c.eval.predictor}}},
            {"sim", sim},
            {"visualize",
             {{"checkpoint", c.visualize.checkpoint},
              {"surface", std::string(sim::to_string(c.visualize.surface))},
              {"frames", c.visualize.frames},
              {"spacing", c.visualize.spacing},
              {"max_alpha", c.visualize.max_alpha}}}};
}

} // namespace steerfuse::pipeline
