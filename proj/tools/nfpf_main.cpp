#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "nfpf/errors.hpp"
#include "nfpf/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Particle filtering with a flow observation model"};
    app.require_subcommand(1);

    std::string config;
    auto add = [&](const char* name, const char* help) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "experiment config file")->required();
        return sub;
    };
    auto* generate = add("generate", "simulate trajectories into data_dir");
    auto* train = add("train", "fit flow and dynamics, write checkpoint and loss CSV");
    auto* filter = add("filter", "run the particle filter on one trajectory");
    auto* eval = add("eval", "score a filter trace against truth or the Kalman filter");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        const auto cfg = nfpf::load_config(config);
        if (generate->parsed()) {
            auto result = nfpf::cmd_generate(cfg);
            std::printf("wrote %zu trajectories, manifest %s\n", result.files.size(), result.manifest.string().c_str());
        } else if (train->parsed()) {
            auto result = nfpf::cmd_train(cfg);
            if (result.epoch_means.empty()) {
                std::printf("no epochs run\n");
            } else {
                std::printf("final nll %.17g\n", result.epoch_means.back());
            }
        } else if (filter->parsed()) {
            auto trace = nfpf::cmd_filter(cfg);
            std::printf("filtered %zu steps, trace %s\n", trace.steps.size(), cfg.trace.string().c_str());
        } else if (eval->parsed()) {
            auto m = nfpf::cmd_eval(cfg);
            std::printf("rmse %.17g, mean ess %.17g, resamples %zu\n", m.overall_rmse, m.mean_ess, m.resample_count);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "nfpf: %s\n", e.what());
        return nfpf::exit_code_for(e);
    }
    return 0;
}
