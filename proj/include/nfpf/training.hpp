#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "nfpf/autodiff.hpp"
#include "nfpf/dynamics.hpp"
#include "nfpf/flow.hpp"
#include "nfpf/mlp.hpp"
#include "nfpf/sim.hpp"

namespace nfpf {

struct TrainingConfig {
    /// Window covers steps k..k+K inclusive.
    std::size_t window = 8;
    double learning_rate = 1e-3;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Global gradient-norm clip; 0 disables.
    double clip_norm = 10.0;
    /// Add U(0, 1/256) noise to observations (pixel data).
    bool dequantize = true;

    void validate() const;
};

/// Noiseless latent mean x_{t-1} entering step t, starting from mu0 and
/// rolled through steps 0..t-1 without gradients.
Vector rollout_state(const DynamicsModel& dynamics, const Trajectory& traj, std::size_t t);

/// -sum_{t=k}^{k+K} log p(y_t | x_t) along the deterministic latent rollout.
ad::Var window_nll(ad::Tape* tape, const FlowModel& flow, const DynamicsModel& dynamics, const Trajectory& traj,
                   std::size_t k, std::size_t K);

struct Window {
    std::size_t trajectory = 0;
    std::size_t start = 0;
    std::size_t K = 0;
};

/// Non-overlapping windows of K+1 steps; a shorter trailing window covers
/// any remainder.
std::vector<Window> make_windows(std::size_t trajectory, std::size_t length, std::size_t K);

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t steps = 0;
};

/// One adaptive-moment step on every parameter using its accumulated grad.
void optimizer_step(const ParamList& params, AdamState& state, const TrainingConfig& cfg);

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
double clip_gradients(const ParamList& params, double max_norm);

struct LossRecord {
    std::size_t epoch = 0;
    std::size_t window = 0;
    double nll = 0.0;
};

struct TrainResult {
    std::vector<LossRecord> history;
    /// Mean of the per-window losses of each epoch.
    std::vector<double> epoch_means;
};

struct TrainOptions {
    /// Written after every epoch when set.
    std::optional<std::filesystem::path> checkpoint;
    std::function<void(std::size_t epoch, double mean_nll)> on_epoch;
};

ParamList model_parameters(FlowModel& flow, DynamicsModel& dynamics);

/// Dataset with dequantization noise applied; deterministic in (seed, index).
std::vector<Trajectory> dequantized(const std::vector<Trajectory>& dataset, std::uint64_t seed);

TrainResult train(FlowModel& flow, DynamicsModel& dynamics, const std::vector<Trajectory>& dataset,
                  const TrainingConfig& cfg, const TrainOptions& options = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

}  // namespace nfpf
