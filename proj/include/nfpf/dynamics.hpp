#pragma once

// Latent linear system x_t = A(x_{t-1}) x_{t-1} + B(x_{t-1}) u_{t-1} + q,
// q ~ N(0, Q), with A and B emitted by a small network and scaled to unit
// Frobenius norm.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>

#include <Eigen/Dense>

#include "nfpf/autodiff.hpp"
#include "nfpf/mlp.hpp"

namespace nfpf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct DynamicsMatrices {
    Matrix A;
    Matrix B;
};

/// Lower-triangular L with L L^T = cov for symmetric positive semi-definite
/// input. Zero pivots are accepted; negative ones raise CovarianceError.
Matrix psd_cholesky(const Matrix& cov, double tol = 1e-10);

/// Throws CovarianceError unless `cov` is symmetric with eigenvalues >= -tol.
void require_psd(const Matrix& cov, const char* what, double tol = 1e-10);

struct NoiseModel {
    Matrix Q;
    Vector mu0;
    Matrix sigma0;

    /// Q = q_scale * I, mu0 = 0, sigma0 = I.
    static NoiseModel defaults(std::size_t state_dim, double q_scale = 1e-4);
    void validate() const;
};

struct DynamicsOutput {
    ad::Var A;
    ad::Var B;
};

/// f_psi: latent state -> (A, B). The control input is not a network input.
class DynamicsNet {
public:
    DynamicsNet() = default;
    DynamicsNet(std::size_t state_dim, std::size_t control_dim, std::size_t hidden, std::mt19937_64& rng);

    std::size_t state_dim() const { return state_dim_; }
    std::size_t control_dim() const { return control_dim_; }

    /// Raw network output, d*d + d*m values (A row-major, then B row-major).
    ad::Var raw(ad::Tape* tape, const ad::Var& x) const;
    /// Normalized A and B, differentiable end to end.
    DynamicsOutput forward(ad::Tape* tape, const ad::Var& x) const;
    DynamicsMatrices evaluate(const Vector& x) const;

    Mlp& network() { return net_; }
    const Mlp& network() const { return net_; }
    void append_parameters(const std::string& prefix, ParamList& out) { net_.append_parameters(prefix, out); }

private:
    std::size_t state_dim_ = 0;
    std::size_t control_dim_ = 0;
    Mlp net_;
};

/// Either a learned network or fixed matrices, plus the noise model.
class DynamicsModel {
public:
    DynamicsModel(DynamicsNet net, NoiseModel noise);
    DynamicsModel(DynamicsMatrices fixed, NoiseModel noise);

    std::size_t state_dim() const;
    std::size_t control_dim() const;

    bool learned() const { return net_.has_value(); }
    DynamicsNet& net() { return *net_; }
    const DynamicsNet& net() const { return *net_; }
    const NoiseModel& noise() const { return noise_; }
    const Matrix& noise_factor() const { return noise_factor_; }

    DynamicsMatrices matrices_at(const Vector& x) const;
    /// Differentiable (A x + B u) for a state on the tape.
    ad::Var step_mean(ad::Tape* tape, const ad::Var& x, const ad::Var& u) const;

    ParamList parameters();

private:
    std::optional<DynamicsNet> net_;
    std::optional<DynamicsMatrices> fixed_;
    NoiseModel noise_;
    Matrix noise_factor_;
};

Matrix frobenius_normalize(const Matrix& m, double min_norm = 1e-12);

Vector predict_mean(const DynamicsMatrices& m, const Vector& x, const Vector& u);

/// predict_mean + L z with L L^T = Q, z standard normal.
template <class Generator>
Vector sample_transition(const DynamicsMatrices& m, const Vector& x, const Vector& u,
                         const Matrix& noise_factor, Generator& rng) {
    Vector mean = predict_mean(m, x, u);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
    return mean + noise_factor * z;
}

template <class Generator>
Vector sample_transition(const DynamicsMatrices& m, const Vector& x, const Vector& u, const NoiseModel& noise,
                         Generator& rng) {
    return sample_transition(m, x, u, psd_cholesky(noise.Q), rng);
}

/// Exact max |eigenvalue| for d <= 2. For larger d returns the spectral norm
/// sqrt(lambda_max(A^T A)) from power iteration, an upper bound on the
/// spectral radius.
double spectral_radius(const Matrix& A);

/// Numerical rank of [B, AB, ..., A^{d-1} B], singular values above
/// rel_tol * largest.
std::size_t controllability_rank(const Matrix& A, const Matrix& B, double rel_tol = 1e-8);

struct StabilityReport {
    double frobenius_A = 0.0;
    double frobenius_B = 0.0;
    double spectral_radius = 0.0;
    std::size_t controllability_rank = 0;
    /// Radius within 1e-6 of the unit circle.
    bool marginal = false;
};

StabilityReport diagnose(const DynamicsMatrices& m);

}  // namespace nfpf
