#pragma once

// Experiment configuration and the generate/train/filter/eval commands.
//
// Configs are line-oriented `key = value` files; `#` starts a comment.
// Relative paths resolve against the directory holding the config file.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nfpf/dynamics.hpp"
#include "nfpf/filters.hpp"
#include "nfpf/flow.hpp"
#include "nfpf/sim.hpp"
#include "nfpf/training.hpp"

namespace nfpf {

enum class EnvKind { Pendulum, LinGauss };
enum class LikelihoodKind { Flow, Linear };
enum class OracleKind { Truth, Kalman };

struct ExperimentConfig {
    EnvKind env = EnvKind::Pendulum;

    // model
    std::size_t latent_dim = 4;
    std::size_t flow_layers = 4;
    std::size_t flow_hidden = 64;
    std::size_t mean_hidden = 64;
    std::size_t dyn_hidden = 32;
    double sigma = 1.0;
    Conditioning conditioning = Conditioning::MeanOnly;
    double q_scale = 1e-4;

    // training
    TrainingConfig training;

    // filtering
    std::size_t particles = 100;
    double resample_threshold = 0.5;
    bool evaluate_at_mean = false;
    LikelihoodKind likelihood = LikelihoodKind::Flow;

    // data
    std::size_t trajectories = 10;
    std::size_t horizon = 200;
    Controller controller = Controller::RandomUniform;
    PendulumParams pendulum;

    std::uint64_t seed = 0;
    OracleKind oracle = OracleKind::Truth;

    // paths (absolute after loading)
    std::filesystem::path data_dir = "data";
    std::filesystem::path checkpoint = "model.ckpt";
    std::filesystem::path loss_csv = "loss.csv";
    std::filesystem::path trajectory;  // defaults to data_dir/traj_000.csv
    std::filesystem::path trace = "trace.csv";
    std::filesystem::path metrics = "metrics.csv";
};

/// Parses config text. Unknown keys and malformed values raise ConfigError
/// naming the key. Relative paths are resolved against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Model {
    std::unique_ptr<FlowModel> flow;
    std::unique_ptr<DynamicsModel> dynamics;
    ParamList parameters() { return model_parameters(*flow, *dynamics); }
};

/// Freshly initialized flow + dynamics for the given data dimensions.
Model build_model(const ExperimentConfig& cfg, std::size_t obs_dim, std::size_t control_dim);

std::filesystem::path trajectory_file(const ExperimentConfig& cfg, std::size_t index);

struct GenerateResult {
    std::vector<std::filesystem::path> files;
    std::filesystem::path manifest;
};
GenerateResult cmd_generate(const ExperimentConfig& cfg);

/// Trajectories listed in data_dir/manifest.csv.
std::vector<Trajectory> load_dataset(const ExperimentConfig& cfg);

TrainResult cmd_train(const ExperimentConfig& cfg);

FilterTrace cmd_filter(const ExperimentConfig& cfg);

struct EvalMetrics {
    std::vector<double> rmse;  // per dimension
    double mean_ess = 0.0;
    std::size_t resample_count = 0;
    /// Overall RMSE of the trace means against the oracle.
    double overall_rmse = 0.0;
};
EvalMetrics cmd_eval(const ExperimentConfig& cfg);

/// Process exit code for an exception: 1 numerical, 2 usage/config/io, 3 data.
int exit_code_for(const std::exception& e);

}  // namespace nfpf
