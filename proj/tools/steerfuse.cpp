// steerfuse gen-data|train|eval|simulate|visualize --config <path> [--seed N] [--out DIR]
//
// Exit codes: 0 success, 2 configuration error (including infeasible tracks),
// 3 runtime failure (missing or corrupt inputs, I/O, training failure),
// 64 command-line usage error.

#include "steerfuse/pipeline/pipeline.hpp"
#include "steerfuse/util/binary_io.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

constexpr int exit_config = 2;
constexpr int exit_runtime = 3;
constexpr int exit_usage = 64;

} // namespace

int main(int argc, char** argv)
{
    using namespace steerfuse;
    CLI::App app{"Camera and lidar steering models: data generation, training and evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    const char* names[] = {"gen-data", "train", "eval", "simulate", "visualize"};
    const char* help[] = {"generate a synthetic frame store", "train the configured variants and seeds",
                          "offline test RMSE per checkpoint", "closed-loop run on a held-out track",
                          "VisualBackProp masks over a straight lane-lined scene"};
    for (int i = 0; i < 5; ++i) {
        CLI::App* sub = app.add_subcommand(names[i], help[i]);
        sub->add_option("--config", config_path, "JSON run config")->required();
        sub->add_option("--seed", seed, "overrides the config seed");
        sub->add_option("--out", out, "output directory (overrides config output)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        pipeline::RunConfig cfg = pipeline::load_config(config_path);
        if (seed) {
            cfg.seed = *seed;
        }
        const std::filesystem::path dir = out ? *out : cfg.output;
        if (command == "gen-data") {
            pipeline::gen_data(cfg, dir, std::cout);
        } else if (command == "train") {
            pipeline::train(cfg, dir, std::cout);
        } else if (command == "eval") {
            pipeline::evaluate(cfg, dir, std::cout);
        } else if (command == "simulate") {
            pipeline::simulate(cfg, dir, std::cout);
        } else {
            pipeline::visualize(cfg, dir, std::cout);
        }
    } catch (const pipeline::ConfigError& e) {
        std::cerr << "steerfuse " << command << ": config error: " << e.what() << "\n";
        return exit_config;
    } catch (const sim::TrackInfeasible& e) {
        std::cerr << "steerfuse " << command << ": infeasible track: " << e.what() << "\n";
        return exit_config;
    } catch (const std::exception& e) {
        std::cerr << "steerfuse " << command << ": " << e.what() << "\n";
        return exit_runtime;
    }
    return 0;
}
