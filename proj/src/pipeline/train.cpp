#include "steerfuse/pipeline/pipeline.hpp"

#include "steerfuse/nn/adam.hpp"
#include "steerfuse/util/rng.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace steerfuse::pipeline {

using nlohmann::json;

namespace {

constexpr std::uint64_t tag_batches = 0x747261696e;
constexpr std::size_t eval_batch = 64;

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Mean and sample standard deviation (0 for a single value).
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
    const double sd = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
    return {{"mean", mean}, {"std", sd}, {"n", v.size()}};
}

struct ValidationPass {
    double loss = 0.0; // normalized units
    double rmse = 0.0; // deg
};

ValidationPass validate_on(arch::Network<float>& net, const data::FrameStore& store,
                           const std::vector<data::FrameRef>& frames, double label_mean, double label_scale)
{
    data::BatchOptions opt;
    opt.batch_size = eval_batch;
    opt.shuffle = false;
    data::BatchIterator it(store, frames, opt, 0, 0);
    data::Batch b;
    double sq = 0.0;
    std::size_t n = 0;
    while (it.next(b)) {
        const nn::Tensor<float> out = net.forward({&b.camera, &b.lidar});
        for (std::size_t i = 0; i < b.labels.size(); ++i) {
            const double err = double(out[i]) * label_scale + label_mean - double(b.labels[i]);
            sq += err * err;
        }
        n += b.labels.size();
    }
    if (n == 0) {
        return {};
    }
    const double mse = sq / double(n);
    return {mse / (label_scale * label_scale), std::sqrt(mse)};
}

arch::Geometry store_geometry(const data::Manifest& m)
{
    for (Resolution r : {Resolution::full, Resolution::half}) {
        const arch::Geometry g = geometry_for(r);
        if (g.camera.in_h == m.camera.rows && g.camera.in_w == m.camera.cols && g.lidar.in_h == m.lidar.rows &&
            g.lidar.in_w == m.lidar.cols) {
            return g;
        }
    }
    throw RuntimeFailure("frame store shapes (camera " + std::to_string(m.camera.rows) + "x" +
                         std::to_string(m.camera.cols) + ", lidar " + std::to_string(m.lidar.rows) + "x" +
                         std::to_string(m.lidar.cols) + ") match no network geometry");
}

} // namespace

std::uint64_t run_seed(const RunConfig& cfg, std::size_t index) { return cfg.seed + index; }

std::string checkpoint_name(arch::Variant v, std::uint64_t seed)
{
    return "checkpoint-" + std::string(arch::to_string(v)) + "-" + std::to_string(seed) + ".bin";
}

TrainReport train(const RunConfig& cfg, const fs::path& out, std::ostream& log)
{
    const fs::path data_dir = cfg.train.data.empty() ? out : fs::path(cfg.train.data);
    if (!fs::exists(data_dir / "manifest.json")) {
        throw RuntimeFailure("no frame store at " + data_dir.string() + " (manifest.json missing)");
    }
    const data::FrameStore store(data_dir);
    const data::Manifest& m = store.manifest();
    const arch::Geometry geometry = store_geometry(m);
    const data::Splits splits = data::make_splits(store);
    std::size_t multiplicity = 1;
    const std::vector<data::FrameRef> weighted = data::weighted_training_list(store, splits.train, &multiplicity);
    if (weighted.empty() || splits.validation_augmented.empty() || splits.validation_center.empty()) {
        throw RuntimeFailure("frame store at " + data_dir.string() + " has no train or validation frames");
    }

    TrainReport report;
    {
        double sum = 0.0, sq = 0.0;
        for (const data::FrameRef& r : weighted) {
            sum += store.header(r).label;
        }
        report.label_mean = sum / double(weighted.size());
        for (const data::FrameRef& r : weighted) {
            const double d = store.header(r).label - report.label_mean;
            sq += d * d;
        }
        const double sd = std::sqrt(sq / double(weighted.size()));
        report.label_scale = sd > 1e-6 ? sd : 1.0;
        auto constant_rmse = [&](const std::vector<data::FrameRef>& frames) {
            double acc = 0.0;
            for (const data::FrameRef& r : frames) {
                const double d = store.header(r).label - report.label_mean;
                acc += d * d;
            }
            return std::sqrt(acc / double(frames.size()));
        };
        report.constant_center_rmse = constant_rmse(splits.validation_center);
        report.constant_validation_rmse = constant_rmse(splits.validation_augmented);
    }
    log << "train: " << weighted.size() << " weighted samples (curve multiplicity " << multiplicity << "), "
        << splits.validation_augmented.size() << " validation (" << splits.validation_center.size()
        << " center); constant predictor center RMSE " << report.constant_center_rmse << " deg\n";

    fs::create_directories(out);
    json variants_json = json::object();
    json timing = json::object();
    for (arch::Variant v : cfg.train.variants) {
        VariantRun vr;
        vr.variant = v;
        const std::string vname(arch::to_string(v));
        for (std::size_t si = 0; si < cfg.train.seeds; ++si) {
            SeedRun run;
            run.seed = run_seed(cfg, si);
            const auto t_run = std::chrono::steady_clock::now();
            arch::Network<float> net(v, geometry, run.seed);
            nn::Adam<float> adam({cfg.train.lr});
            std::vector<nn::Tensor<float>> best_params;
            double best_loss = std::numeric_limits<double>::infinity();
            try {
                for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
                    const auto t_epoch = std::chrono::steady_clock::now();
                    data::BatchOptions opt;
                    opt.batch_size = cfg.train.batch_size;
                    opt.shuffle = true;
                    opt.jitter = cfg.train.jitter;
                    opt.jitter_config = cfg.train.jitter_config;
                    opt.camera = arch::uses(v, arch::Modality::camera);
                    opt.lidar = arch::uses(v, arch::Modality::lidar);
                    data::BatchIterator it(store, weighted, opt, derive_seed(run.seed, {tag_batches}), epoch);
                    data::Batch b;
                    double loss_sum = 0.0;
                    std::size_t count = 0;
                    while (it.next(b)) {
                        nn::Tensor<float> target({b.labels.size(), 1});
                        for (std::size_t i = 0; i < b.labels.size(); ++i) {
                            target[i] = float((double(b.labels[i]) - report.label_mean) / report.label_scale);
                        }
                        net.zero_grad();
                        const nn::Tensor<float> pred = net.forward({&b.camera, &b.lidar});
                        const nn::LossResult<float> loss = nn::mse_loss(pred, target);
                        if (!std::isfinite(loss.value)) {
                            throw nn::NonFiniteGradient("non-finite training loss at epoch " + std::to_string(epoch));
                        }
                        net.backward(loss.grad);
                        adam.step(net.parameters());
                        loss_sum += double(loss.value) * double(b.labels.size());
                        count += b.labels.size();
                    }
                    EpochLog e;
                    e.epoch = epoch;
                    e.train_loss = loss_sum / double(count);
                    const ValidationPass aug = validate_on(net, store, splits.validation_augmented,
                                                           report.label_mean, report.label_scale);
                    const ValidationPass ctr = validate_on(net, store, splits.validation_center, report.label_mean,
                                                           report.label_scale);
                    if (!std::isfinite(aug.loss) || !std::isfinite(ctr.loss)) {
                        throw nn::NonFiniteGradient("non-finite validation loss at epoch " + std::to_string(epoch));
                    }
                    e.validation_loss = aug.loss;
                    e.validation_rmse = aug.rmse;
                    e.center_rmse = ctr.rmse;
                    e.seconds = seconds_since(t_epoch);
                    run.epochs.push_back(e);
                    if (e.validation_loss < best_loss) {
                        best_loss = e.validation_loss;
                        run.best_epoch = epoch;
                        best_params.clear();
                        for (const nn::Parameter<float>* p : net.parameters()) {
                            best_params.push_back(p->value);
                        }
                    }
                    log << vname << " seed " << run.seed << " epoch " << epoch << ": train " << e.train_loss
                        << ", val " << e.validation_loss << " (" << e.validation_rmse << " deg), center "
                        << e.center_rmse << " deg, " << e.seconds << " s\n"
                        << std::flush;
                }
            } catch (const nn::NonFiniteGradient& err) {
                run.diverged = true;
                run.error = err.what();
                log << vname << " seed " << run.seed << " diverged: " << err.what() << "; continuing\n";
            }
            if (!run.diverged && run.best_epoch > 0) {
                const auto params = net.parameters();
                for (std::size_t i = 0; i < params.size(); ++i) {
                    params[i]->value = best_params[i];
                }
                arch::CheckpointMeta meta;
                meta.variant = v;
                meta.geometry = geometry;
                meta.norm = m.norm;
                meta.seed = run.seed;
                meta.extra = {{"label_mean", report.label_mean},
                              {"label_scale", report.label_scale},
                              {"reflectance_scales", m.reflectance.scales},
                              {"best_epoch", run.best_epoch},
                              {"epochs", cfg.train.epochs},
                              {"lr", cfg.train.lr},
                              {"batch_size", cfg.train.batch_size}};
                run.checkpoint = out / checkpoint_name(v, run.seed);
                arch::save_checkpoint(run.checkpoint, net, meta);
            }
            run.seconds = seconds_since(t_run);
            timing[vname][std::to_string(run.seed)] = run.seconds;
            vr.seeds.push_back(std::move(run));
        }

        json seeds = json::array();
        std::vector<double> val, center;
        double best_center = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < vr.seeds.size(); ++i) {
            const SeedRun& r = vr.seeds[i];
            json epochs = json::array();
            for (const EpochLog& e : r.epochs) {
                epochs.push_back({{"epoch", e.epoch},
                                  {"train_loss", e.train_loss},
                                  {"validation_loss", e.validation_loss},
                                  {"validation_rmse", e.validation_rmse},
                                  {"center_rmse", e.center_rmse}});
            }
            json sj = {{"seed", r.seed}, {"diverged", r.diverged}, {"epochs", epochs}};
            if (r.diverged) {
                sj["error"] = r.error;
            }
            if (!r.diverged && r.best_epoch > 0) {
                sj["best_epoch"] = r.best_epoch;
                sj["checkpoint"] = r.checkpoint.filename().string();
                sj["validation_rmse"] = r.best().validation_rmse;
                sj["center_rmse"] = r.best().center_rmse;
                val.push_back(r.best().validation_rmse);
                center.push_back(r.best().center_rmse);
                if (r.best().center_rmse < best_center) {
                    best_center = r.best().center_rmse;
                    vr.pick = i;
                }
            }
            seeds.push_back(sj);
        }
        json vj = {{"seeds", seeds}, {"validation_rmse", mean_std(val)}, {"center_rmse", mean_std(center)}};
        if (vr.pick) {
            vj["pick"] = vr.seeds[*vr.pick].checkpoint.filename().string();
            log << vname << ": validation RMSE " << vj["validation_rmse"].dump() << ", center RMSE "
                << vj["center_rmse"].dump() << ", pick " << vj["pick"].get<std::string>() << "\n";
        } else {
            log << vname << ": every seed diverged\n";
        }
        variants_json[vname] = vj;
        report.variants.push_back(std::move(vr));
    }

    report.metrics = {{"command", "train"},
                      {"seed", cfg.seed},
                      {"data", data_dir.filename().string()},
                      {"label_mean", report.label_mean},
                      {"label_scale", report.label_scale},
                      {"curve_multiplicity", multiplicity},
                      {"frames",
                       {{"weighted_train", weighted.size()},
                        {"train", splits.train.size()},
                        {"validation", splits.validation_augmented.size()},
                        {"validation_center", splits.validation_center.size()}}},
                      {"constant_predictor",
                       {{"validation_rmse", report.constant_validation_rmse},
                        {"center_rmse", report.constant_center_rmse}}},
                      {"variants", variants_json}};
    write_json(out / "metrics.json", report.metrics);
    // Wall-clock numbers stay out of metrics.json so reruns compare byte for byte.
    write_json(out / "timing.json", timing);

    const bool any = std::any_of(report.variants.begin(), report.variants.end(),
                                 [](const VariantRun& r) { return r.pick.has_value(); });
    if (!any) {
        throw RuntimeFailure("training produced no checkpoint; every run diverged");
    }
    return report;
}

} // namespace steerfuse::pipeline
