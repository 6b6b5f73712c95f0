#include "nfpf/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include "nfpf/checkpoint.hpp"
#include "nfpf/errors.hpp"

namespace nfpf {

void TrainingConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("optimizer moments must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("optimizer epsilon must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip norm must be non-negative");
}

namespace {

ad::Var row_var(const RowMatrix& m, std::size_t t) {
    const double* p = m.data() + static_cast<std::ptrdiff_t>(t) * m.cols();
    return ad::Var::constant(std::vector<double>(p, p + m.cols()));
}

ad::Var vector_var(const Vector& v) { return ad::Var::constant(std::vector<double>(v.data(), v.data() + v.size())); }

}  // namespace

Vector rollout_state(const DynamicsModel& dynamics, const Trajectory& traj, std::size_t t) {
    ad::Var x = vector_var(dynamics.noise().mu0);
    ad::Var u = ad::Var::constant(std::vector<double>(dynamics.control_dim(), 0.0));
    for (std::size_t s = 0; s < t; ++s) {
        x = dynamics.step_mean(nullptr, x, u);
        u = row_var(traj.controls, s);
    }
    auto values = x.value();
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

ad::Var window_nll(ad::Tape* tape, const FlowModel& flow, const DynamicsModel& dynamics, const Trajectory& traj,
                   std::size_t k, std::size_t K) {
    if (k + K >= traj.length()) {
        throw UsageError("window [" + std::to_string(k) + ", " + std::to_string(k + K) +
                         "] exceeds trajectory of length " + std::to_string(traj.length()));
    }
    if (traj.obs_dim() != flow.obs_dim() || traj.control_dim() != dynamics.control_dim() ||
        flow.state_dim() != dynamics.state_dim()) {
        throw DimensionError("model dimensions do not match the trajectory");
    }
    ad::Var x = vector_var(rollout_state(dynamics, traj, k));
    ad::Var u = k == 0 ? ad::Var::constant(std::vector<double>(dynamics.control_dim(), 0.0))
                       : row_var(traj.controls, k - 1);
    ad::Var total = ad::Var::scalar(0.0);
    for (std::size_t t = k; t <= k + K; ++t) {
        x = dynamics.step_mean(tape, x, u);
        total = ad::sub(total, flow.observation_loglik(tape, row_var(traj.observations, t), x));
        u = row_var(traj.controls, t);
    }
    return total;
}

std::vector<Window> make_windows(std::size_t trajectory, std::size_t length, std::size_t K) {
    std::vector<Window> out;
    for (std::size_t start = 0; start < length; start += K + 1) {
        out.push_back({trajectory, start, std::min(K, length - 1 - start)});
    }
    return out;
}

void optimizer_step(const ParamList& params, AdamState& state, const TrainingConfig& cfg) {
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (std::size_t p = 0; p < params.size(); ++p) {
            state.m[p].assign(params[p].tensor->size(), 0.0);
            state.v[p].assign(params[p].tensor->size(), 0.0);
        }
        state.steps = 0;
    }
    for (const auto& p : params) {
        if (!ad::all_finite(p.tensor->grad())) throw NumericalError("non-finite gradient for parameter " + p.name);
    }
    ++state.steps;
    const double t = static_cast<double>(state.steps);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& tensor = *params[p].tensor;
        auto data = tensor.mutable_data();
        auto grad = tensor.grad();
        auto& m = state.m[p];
        auto& v = state.v[p];
        if (m.size() != data.size()) throw DimensionError("optimizer state does not match parameter " + params[p].name);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad.empty() ? 0.0 : grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            data[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
}

double clip_gradients(const ParamList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.tensor->grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double factor = max_norm / norm;
        for (const auto& p : params) {
            for (double& g : p.tensor->mutable_grad()) g *= factor;
        }
    }
    return norm;
}

ParamList model_parameters(FlowModel& flow, DynamicsModel& dynamics) {
    ParamList params = flow.parameters();
    auto dyn = dynamics.parameters();
    params.insert(params.end(), dyn.begin(), dyn.end());
    return params;
}

std::vector<Trajectory> dequantized(const std::vector<Trajectory>& dataset, std::uint64_t seed) {
    std::vector<Trajectory> out = dataset;
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + i + 1);
        std::uniform_real_distribution<double> noise(0.0, 1.0 / 256.0);
        auto& obs = out[i].observations;
        for (Eigen::Index r = 0; r < obs.rows(); ++r) {
            for (Eigen::Index c = 0; c < obs.cols(); ++c) obs(r, c) += noise(rng);
        }
    }
    return out;
}

TrainResult train(FlowModel& flow, DynamicsModel& dynamics, const std::vector<Trajectory>& dataset,
                  const TrainingConfig& cfg, const TrainOptions& options) {
    cfg.validate();
    if (!dynamics.learned()) throw ConfigError("training requires a learned dynamics network");
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& traj = dataset[i];
        if (traj.obs_dim() != flow.obs_dim() || traj.control_dim() != dynamics.control_dim()) {
            throw DataError("trajectory " + std::to_string(i) + " has observation/control dimensions " +
                            std::to_string(traj.obs_dim()) + "/" + std::to_string(traj.control_dim()) +
                            ", model expects " + std::to_string(flow.obs_dim()) + "/" +
                            std::to_string(dynamics.control_dim()));
        }
    }
    const std::vector<Trajectory> data = cfg.dequantize ? dequantized(dataset, cfg.seed) : dataset;

    std::vector<Window> windows;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto w = make_windows(i, data[i].length(), cfg.window);
        windows.insert(windows.end(), w.begin(), w.end());
    }

    ParamList params = model_parameters(flow, dynamics);
    for (auto& p : params) {
        p.tensor->set_requires_grad(true);
        p.tensor->mutable_grad();
    }
    AdamState adam;
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::vector<std::size_t> order(windows.size());

    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_total = 0.0;
        for (std::size_t idx : order) {
            const auto& w = windows[idx];
            for (auto& p : params) p.tensor->zero_grad();
            double nll = 0.0;
            try {
                ad::Tape tape;
                auto loss = window_nll(&tape, flow, dynamics, data[w.trajectory], w.start, w.K);
                nll = loss.item();
                if (!std::isfinite(nll)) throw NumericalError("non-finite loss");
                tape.backward(loss);
                clip_gradients(params, cfg.clip_norm);
                optimizer_step(params, adam, cfg);
            } catch (const NumericalError& e) {
                throw NumericalError("epoch " + std::to_string(epoch) + ", window " + std::to_string(idx) + ": " +
                                     e.what());
            }
            result.history.push_back({epoch, idx, nll});
            epoch_total += nll;
        }
        const double mean = windows.empty() ? 0.0 : epoch_total / static_cast<double>(windows.size());
        result.epoch_means.push_back(mean);
        if (options.checkpoint) save_checkpoint(*options.checkpoint, params);
        if (options.on_epoch) options.on_epoch(epoch, mean);
    }
    return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write loss history " + path.string());
    std::string text = "epoch,window,nll\n";
    char buf[32];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%.17g", r.nll);
        text += std::to_string(r.epoch) + ',' + std::to_string(r.window) + ',' + buf + '\n';
    }
    out << text;
    if (!out) throw IoError("failed writing loss history " + path.string());
}

}  // namespace nfpf
