#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nfpf/dynamics.hpp"
#include "nfpf/random.hpp"
#include "nfpf/sim.hpp"

namespace nfpf {

// ---------------------------------------------------------------------------
// Kalman filter

struct GaussianBelief {
    Vector mean;
    Matrix cov;
};

GaussianBelief kalman_predict(const GaussianBelief& belief, const Matrix& A, const Matrix& B, const Vector& u,
                              const Matrix& Q);

/// Joseph-form update. Throws NumericalError for a singular innovation covariance.
GaussianBelief kalman_update(const GaussianBelief& belief, const Matrix& H, const Matrix& R, const Vector& y);

struct KalmanTrace {
    std::vector<GaussianBelief> filtered;
    std::vector<Vector> innovations;
    std::vector<Matrix> innovation_covs;
};

/// Filters a trajectory of the given system under the shared time convention
/// (prior N(mu0, sigma0), zero control before the first row).
KalmanTrace kalman_filter(const LinGaussSystem& sys, const Trajectory& traj);

// ---------------------------------------------------------------------------
// Bootstrap particle filter

struct ParticleSet {
    Matrix states;   // N x d
    Vector weights;  // N

    std::size_t size() const { return static_cast<std::size_t>(states.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(states.cols()); }
    Vector particle(std::size_t i) const { return states.row(static_cast<Eigen::Index>(i)).transpose(); }
};

/// log p(y | x)
using LogLikelihood = std::function<double(const Vector& y, const Vector& x)>;

/// Exact Gaussian likelihood of y = H x + r, r ~ N(0, R).
LogLikelihood linear_gaussian_loglik(const Matrix& H, const Matrix& R);

// Substream tags; particle i at step t draws from Rng::stream(seed, 4 t + tag, i).
inline constexpr std::uint64_t kInitStream = 0;
inline constexpr std::uint64_t kPredictStream = 1;
inline constexpr std::uint64_t kResampleStream = 2;

ParticleSet pf_init(std::size_t N, const Vector& mu0, const Matrix& sigma0, std::uint64_t seed);

/// Propagates every particle through the dynamics with its own A(x), B(x).
/// With `at_mean`, the matrices are evaluated once at the weighted mean.
ParticleSet pf_predict(const ParticleSet& ps, const DynamicsModel& dynamics, const Vector& u, std::uint64_t seed,
                       std::size_t step, bool at_mean = false);

/// w_i <- w_i exp(loglik_i - max_j loglik_j), then normalized.
ParticleSet pf_weight_update(const ParticleSet& ps, std::span<const double> logliks, std::size_t step);
ParticleSet pf_weight_update(const ParticleSet& ps, const LogLikelihood& loglik, const Vector& y, std::size_t step);

double ess(const ParticleSet& ps);

/// Systematic resampling with a single uniform offset; output weights 1/N.
ParticleSet systematic_resample(const ParticleSet& ps, Rng& rng);
/// Offspring counts chosen by systematic resampling for a given offset in [0, 1).
std::vector<std::size_t> systematic_counts(std::span<const double> weights, double offset);

Vector posterior_mean(const ParticleSet& ps);

struct FilterConfig {
    std::size_t particles = 100;
    /// Resample when ESS < threshold * N.
    double resample_threshold = 0.5;
    std::uint64_t seed = 0;
    bool evaluate_at_mean = false;
    bool keep_weights = true;

    void validate() const;
};

struct FilterStep {
    Vector mean;
    double ess = 0.0;
    bool resampled = false;
    /// Weights after the update, before any resampling.
    Vector weights;
};

struct FilterTrace {
    std::size_t state_dim = 0;
    std::vector<FilterStep> steps;
};

FilterTrace run_filter(const Trajectory& traj, const LogLikelihood& loglik, const DynamicsModel& dynamics,
                       const FilterConfig& cfg);

/// Columns: t, mean_0..mean_{d-1}, ess, resampled, then true_0.. when `truth`
/// is given. 17 significant digits.
void write_trace_csv(const std::filesystem::path& path, const FilterTrace& trace,
                     const Trajectory* truth = nullptr);

struct TraceTable {
    std::vector<std::size_t> t;
    std::vector<Vector> means;
    std::vector<double> ess;
    std::vector<bool> resampled;
    std::vector<Vector> truth;  // empty when the trace carries no truth columns
    std::size_t state_dim = 0;
    std::size_t truth_dim = 0;
};

TraceTable read_trace_csv(const std::filesystem::path& path);

}  // namespace nfpf
