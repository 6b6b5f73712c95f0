#include "nfpf/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "nfpf/checkpoint.hpp"
#include "nfpf/errors.hpp"

namespace nfpf {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return {};
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::size_t parse_count(const std::string& key, const std::string& value, bool allow_zero = false) {
    try {
        std::size_t pos = 0;
        if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
        const auto v = std::stoull(value, &pos);
        if (pos != value.size() || (!allow_zero && v == 0)) throw std::invalid_argument("range");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a positive integer, got '" + value + "'");
    }
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size() || !std::isfinite(v)) throw std::invalid_argument("bad");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

fs::path resolve(const fs::path& base, const std::string& value) {
    fs::path p(value);
    if (p.is_relative()) p = base / p;
    return p.lexically_normal();
}

void ensure_parent(const fs::path& file) {
    std::error_code ec;
    if (file.has_parent_path()) fs::create_directories(file.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + file.parent_path().string() + ": " + ec.message());
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
    ExperimentConfig cfg;
    std::optional<bool> dequantize;
    bool trajectory_set = false;
    const fs::path base = base_dir.empty() ? fs::current_path() : fs::absolute(base_dir);

    using Setter = std::function<void(const std::string& key, const std::string& value)>;
    const std::map<std::string, Setter> setters = {
        {"env",
         [&](auto& k, auto& v) {
             if (v == "pendulum") cfg.env = EnvKind::Pendulum;
             else if (v == "lingauss") cfg.env = EnvKind::LinGauss;
             else throw ConfigError("config key '" + k + "': expected pendulum or lingauss, got '" + v + "'");
         }},
        {"latent_dim", [&](auto& k, auto& v) { cfg.latent_dim = parse_count(k, v); }},
        {"flow_layers", [&](auto& k, auto& v) { cfg.flow_layers = parse_count(k, v); }},
        {"flow_hidden", [&](auto& k, auto& v) { cfg.flow_hidden = parse_count(k, v); }},
        {"mean_hidden", [&](auto& k, auto& v) { cfg.mean_hidden = parse_count(k, v); }},
        {"dyn_hidden", [&](auto& k, auto& v) { cfg.dyn_hidden = parse_count(k, v); }},
        {"sigma", [&](auto& k, auto& v) { cfg.sigma = parse_real(k, v); }},
        {"conditioning",
         [&](auto& k, auto& v) {
             if (v == "mean") cfg.conditioning = Conditioning::MeanOnly;
             else if (v == "coupling") cfg.conditioning = Conditioning::CouplingLayers;
             else throw ConfigError("config key '" + k + "': expected mean or coupling, got '" + v + "'");
         }},
        {"q_scale", [&](auto& k, auto& v) { cfg.q_scale = parse_real(k, v); }},
        {"window", [&](auto& k, auto& v) { cfg.training.window = parse_count(k, v, true); }},
        {"lr", [&](auto& k, auto& v) { cfg.training.learning_rate = parse_real(k, v); }},
        {"epochs", [&](auto& k, auto& v) { cfg.training.epochs = parse_count(k, v, true); }},
        {"beta1", [&](auto& k, auto& v) { cfg.training.beta1 = parse_real(k, v); }},
        {"beta2", [&](auto& k, auto& v) { cfg.training.beta2 = parse_real(k, v); }},
        {"eps", [&](auto& k, auto& v) { cfg.training.epsilon = parse_real(k, v); }},
        {"clip_norm", [&](auto& k, auto& v) { cfg.training.clip_norm = parse_real(k, v); }},
        {"dequantize", [&](auto& k, auto& v) { dequantize = parse_bool(k, v); }},
        {"particles", [&](auto& k, auto& v) { cfg.particles = parse_count(k, v); }},
        {"resample_threshold", [&](auto& k, auto& v) { cfg.resample_threshold = parse_real(k, v); }},
        {"evaluate_at_mean", [&](auto& k, auto& v) { cfg.evaluate_at_mean = parse_bool(k, v); }},
        {"likelihood",
         [&](auto& k, auto& v) {
             if (v == "flow") cfg.likelihood = LikelihoodKind::Flow;
             else if (v == "linear") cfg.likelihood = LikelihoodKind::Linear;
             else throw ConfigError("config key '" + k + "': expected flow or linear, got '" + v + "'");
         }},
        {"trajectories", [&](auto& k, auto& v) { cfg.trajectories = parse_count(k, v); }},
        {"horizon", [&](auto& k, auto& v) { cfg.horizon = parse_count(k, v, true); }},
        {"controller", [&](auto&, auto& v) { cfg.controller = parse_controller(v); }},
        {"image_side", [&](auto& k, auto& v) { cfg.pendulum.image_side = parse_count(k, v); }},
        {"dt", [&](auto& k, auto& v) { cfg.pendulum.dt = parse_real(k, v); }},
        {"mass", [&](auto& k, auto& v) { cfg.pendulum.mass = parse_real(k, v); }},
        {"length", [&](auto& k, auto& v) { cfg.pendulum.length = parse_real(k, v); }},
        {"gravity", [&](auto& k, auto& v) { cfg.pendulum.gravity = parse_real(k, v); }},
        {"damping", [&](auto& k, auto& v) { cfg.pendulum.damping = parse_real(k, v); }},
        {"torque_scale", [&](auto& k, auto& v) { cfg.pendulum.torque_scale = parse_real(k, v); }},
        {"seed",
         [&](auto& k, auto& v) {
             cfg.seed = parse_count(k, v, true);
             cfg.training.seed = cfg.seed;
         }},
        {"oracle",
         [&](auto& k, auto& v) {
             if (v == "truth") cfg.oracle = OracleKind::Truth;
             else if (v == "kf") cfg.oracle = OracleKind::Kalman;
             else throw ConfigError("config key '" + k + "': expected truth or kf, got '" + v + "'");
         }},
        {"data_dir", [&](auto&, auto& v) { cfg.data_dir = resolve(base, v); }},
        {"checkpoint", [&](auto&, auto& v) { cfg.checkpoint = resolve(base, v); }},
        {"loss_csv", [&](auto&, auto& v) { cfg.loss_csv = resolve(base, v); }},
        {"trajectory",
         [&](auto&, auto& v) {
             cfg.trajectory = resolve(base, v);
             trajectory_set = true;
         }},
        {"trace", [&](auto&, auto& v) { cfg.trace = resolve(base, v); }},
        {"metrics", [&](auto&, auto& v) { cfg.metrics = resolve(base, v); }},
    };

    cfg.data_dir = resolve(base, cfg.data_dir.string());
    cfg.checkpoint = resolve(base, cfg.checkpoint.string());
    cfg.loss_csv = resolve(base, cfg.loss_csv.string());
    cfg.trace = resolve(base, cfg.trace.string());
    cfg.metrics = resolve(base, cfg.metrics.string());

    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
        if (value.empty()) throw ConfigError("config key '" + key + "' has no value");
        it->second(key, value);
    }

    if (!trajectory_set) cfg.trajectory = cfg.data_dir / "traj_000.csv";
    cfg.training.dequantize = dequantize.value_or(cfg.env == EnvKind::Pendulum);
    if (cfg.env == EnvKind::LinGauss && cfg.pendulum.dt == PendulumParams{}.dt) cfg.pendulum.dt = 1.0;
    if (cfg.likelihood == LikelihoodKind::Linear && cfg.env != EnvKind::LinGauss) {
        throw ConfigError("config key 'likelihood': linear is only available for env = lingauss");
    }
    if (!(cfg.sigma > 0.0)) throw ConfigError("config key 'sigma' must be positive");
    if (!(cfg.resample_threshold >= 0.0 && cfg.resample_threshold <= 1.0)) {
        throw ConfigError("config key 'resample_threshold' must lie in [0, 1]");
    }
    if (!(cfg.q_scale >= 0.0)) throw ConfigError("config key 'q_scale' must be non-negative");
    cfg.pendulum.validate();
    cfg.training.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), fs::absolute(path).parent_path());
}

Model build_model(const ExperimentConfig& cfg, std::size_t obs_dim, std::size_t control_dim) {
    FlowConfig fc;
    fc.obs_dim = obs_dim;
    fc.state_dim = cfg.latent_dim;
    fc.layers = cfg.flow_layers;
    fc.coupling_hidden = cfg.flow_hidden;
    fc.mean_hidden = cfg.mean_hidden;
    fc.sigma = cfg.sigma;
    fc.conditioning = cfg.conditioning;
    Model model;
    model.flow = std::make_unique<FlowModel>(fc, cfg.seed);
    std::mt19937_64 rng(cfg.seed + 1);
    DynamicsNet net(cfg.latent_dim, control_dim, cfg.dyn_hidden, rng);
    model.dynamics = std::make_unique<DynamicsModel>(std::move(net), NoiseModel::defaults(cfg.latent_dim, cfg.q_scale));
    return model;
}

fs::path trajectory_file(const ExperimentConfig& cfg, std::size_t index) {
    char name[32];
    std::snprintf(name, sizeof name, "traj_%03zu.csv", index);
    return cfg.data_dir / name;
}

namespace {

Trajectory generate_one(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.env == EnvKind::LinGauss) {
        return lingauss_generate(lingauss_benchmark(), cfg.horizon, cfg.controller, seed, cfg.pendulum.dt);
    }
    return pendulum_generate(cfg.pendulum, cfg.horizon, cfg.controller, seed);
}

}  // namespace

GenerateResult cmd_generate(const ExperimentConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.data_dir, ec);
    if (ec) throw IoError("cannot create data directory " + cfg.data_dir.string() + ": " + ec.message());

    GenerateResult result;
    result.manifest = cfg.data_dir / "manifest.csv";
    std::string manifest = "index,file,seed\n";
    for (std::size_t i = 0; i < cfg.trajectories; ++i) {
        const std::uint64_t seed = cfg.seed + i;
        auto path = trajectory_file(cfg, i);
        write_trajectory(path, generate_one(cfg, seed));
        manifest += std::to_string(i) + ',' + path.filename().string() + ',' + std::to_string(seed) + '\n';
        result.files.push_back(path);
    }
    std::ofstream out(result.manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + result.manifest.string());
    out << manifest;
    if (!out) throw IoError("failed writing manifest " + result.manifest.string());
    return result;
}

std::vector<Trajectory> load_dataset(const ExperimentConfig& cfg) {
    const auto manifest = cfg.data_dir / "manifest.csv";
    std::ifstream in(manifest);
    if (!in) throw DataError("missing dataset manifest " + manifest.string());
    std::string line;
    std::getline(in, line);
    std::vector<Trajectory> data;
    std::vector<fs::path> files;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string index;
        std::string file;
        if (!std::getline(ls, index, ',') || !std::getline(ls, file, ',')) {
            throw DataError("malformed manifest line '" + line + "' in " + manifest.string());
        }
        files.push_back(cfg.data_dir / file);
        data.push_back(read_trajectory(files.back()));
        const auto& first = data.front();
        const auto& t = data.back();
        if (t.obs_dim() != first.obs_dim() || t.control_dim() != first.control_dim() ||
            t.env_state_dim() != first.env_state_dim()) {
            throw DataError("dimension mismatch between " + files.front().string() + " (D=" +
                            std::to_string(first.obs_dim()) + ", m=" + std::to_string(first.control_dim()) + ") and " +
                            files.back().string() + " (D=" + std::to_string(t.obs_dim()) +
                            ", m=" + std::to_string(t.control_dim()) + ")");
        }
    }
    if (data.empty()) throw DataError("dataset manifest " + manifest.string() + " lists no trajectories");
    return data;
}

TrainResult cmd_train(const ExperimentConfig& cfg) {
    auto data = load_dataset(cfg);
    auto model = build_model(cfg, data.front().obs_dim(), data.front().control_dim());
    ensure_parent(cfg.checkpoint);
    ensure_parent(cfg.loss_csv);
    TrainOptions options;
    options.checkpoint = cfg.checkpoint;
    auto result = train(*model.flow, *model.dynamics, data, cfg.training, options);
    if (cfg.training.epochs == 0) save_checkpoint(cfg.checkpoint, model.parameters());
    write_loss_csv(cfg.loss_csv, result.history);
    return result;
}

FilterTrace cmd_filter(const ExperimentConfig& cfg) {
    auto traj = read_trajectory(cfg.trajectory);
    FilterConfig fc;
    fc.particles = cfg.particles;
    fc.resample_threshold = cfg.resample_threshold;
    fc.seed = cfg.seed;
    fc.evaluate_at_mean = cfg.evaluate_at_mean;
    fc.keep_weights = false;

    FilterTrace trace;
    if (cfg.likelihood == LikelihoodKind::Linear) {
        const auto sys = lingauss_benchmark();
        if (traj.length() > 0 && (traj.obs_dim() != sys.obs_dim() || traj.control_dim() != sys.control_dim())) {
            throw DataError("trajectory " + cfg.trajectory.string() + " does not match the linear-Gaussian benchmark");
        }
        DynamicsModel dynamics(DynamicsMatrices{sys.A, sys.B}, NoiseModel{sys.Q, sys.mu0, sys.sigma0});
        trace = run_filter(traj, linear_gaussian_loglik(sys.H, sys.R), dynamics, fc);
    } else {
        const auto ckpt = read_checkpoint(cfg.checkpoint);
        if (traj.length() == 0 && traj.obs_dim() < 2) {
            // Nothing to filter; emit an empty trace with the configured width.
            trace.state_dim = cfg.latent_dim;
        } else {
            auto model = build_model(cfg, traj.obs_dim(), traj.control_dim());
            load_checkpoint(ckpt, model.parameters());
            const FlowModel& flow = *model.flow;
            LogLikelihood loglik = [&flow](const Vector& y, const Vector& x) {
                return flow.observation_loglik({y.data(), static_cast<std::size_t>(y.size())},
                                               {x.data(), static_cast<std::size_t>(x.size())});
            };
            trace = run_filter(traj, loglik, *model.dynamics, fc);
        }
    }
    ensure_parent(cfg.trace);
    write_trace_csv(cfg.trace, trace, &traj);
    return trace;
}

EvalMetrics cmd_eval(const ExperimentConfig& cfg) {
    auto table = read_trace_csv(cfg.trace);
    const std::size_t T = table.means.size();
    std::vector<Vector> reference;
    if (cfg.oracle == OracleKind::Truth) {
        if (table.truth_dim != table.state_dim) {
            throw DataError("trace has " + std::to_string(table.state_dim) + " mean columns but " +
                            std::to_string(table.truth_dim) + " truth columns");
        }
        reference = table.truth;
    } else {
        if (cfg.env != EnvKind::LinGauss) throw ConfigError("oracle = kf requires env = lingauss");
        const auto sys = lingauss_benchmark();
        if (table.state_dim != sys.state_dim()) {
            throw DataError("trace has " + std::to_string(table.state_dim) + " mean columns, the Kalman oracle has " +
                            std::to_string(sys.state_dim()));
        }
        auto traj = read_trajectory(cfg.trajectory);
        if (traj.length() != T) throw DataError("trace and trajectory lengths differ");
        for (const auto& b : kalman_filter(sys, traj).filtered) reference.push_back(b.mean);
    }

    EvalMetrics metrics;
    metrics.rmse.assign(table.state_dim, 0.0);
    double total = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        const Vector diff = table.means[t] - reference[t];
        for (std::size_t i = 0; i < table.state_dim; ++i) metrics.rmse[i] += diff[static_cast<Eigen::Index>(i)] * diff[static_cast<Eigen::Index>(i)];
        total += diff.squaredNorm();
        metrics.mean_ess += table.ess[t];
        metrics.resample_count += table.resampled[t] ? 1 : 0;
    }
    if (T > 0) {
        for (auto& r : metrics.rmse) r = std::sqrt(r / static_cast<double>(T));
        metrics.overall_rmse = std::sqrt(total / static_cast<double>(T * std::max<std::size_t>(table.state_dim, 1)));
        metrics.mean_ess /= static_cast<double>(T);
    }

    ensure_parent(cfg.metrics);
    std::ofstream out(cfg.metrics, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write metrics " + cfg.metrics.string());
    char buf[64];
    std::string text = "metric,value\n";
    for (std::size_t i = 0; i < metrics.rmse.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", metrics.rmse[i]);
        text += "rmse_" + std::to_string(i) + ',' + buf + '\n';
    }
    std::snprintf(buf, sizeof buf, "%.17g", metrics.mean_ess);
    text += std::string("mean_ess,") + buf + '\n';
    text += "resample_count," + std::to_string(metrics.resample_count) + '\n';
    std::snprintf(buf, sizeof buf, "%.17g", metrics.overall_rmse);
    text += (cfg.oracle == OracleKind::Kalman ? "pf_kf_rmse," : "rmse,") + std::string(buf) + '\n';
    out << text;
    if (!out) throw IoError("failed writing metrics " + cfg.metrics.string());
    return metrics;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return 1;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return 3;
    return 2;
}

}  // namespace nfpf
