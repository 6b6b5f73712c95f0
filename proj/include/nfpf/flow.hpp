#pragma once

// Conditional normalizing-flow observation likelihood.
//
// The generative direction maps a base variable yhat ~ N(mu_phi(x), sigma^2 I)
// through affine coupling layers g_theta to an observation y. The density of
// y given a latent state x follows from the change of variables:
//
//   log p(y | x) = log N(g^{-1}(y) | mu_phi(x), sigma^2 I) + log|det J_{g^{-1}}(y)|

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "nfpf/autodiff.hpp"
#include "nfpf/mlp.hpp"

namespace nfpf {

enum class Conditioning {
    /// Unconditional flow; x enters only through the base mean mu_phi(x).
    MeanOnly,
    /// x is additionally concatenated to every coupling network input.
    CouplingLayers,
};

struct FlowConfig {
    std::size_t obs_dim = 0;
    std::size_t state_dim = 4;
    std::size_t layers = 4;
    std::size_t coupling_hidden = 64;
    std::size_t mean_hidden = 64;
    double sigma = 1.0;
    /// Log-scales are scale_bound * tanh(raw).
    double scale_bound = 2.0;
    Conditioning conditioning = Conditioning::MeanOnly;

    void validate() const;
};

/// Affine coupling: coordinates where the mask is true pass through and
/// parameterize a scale/shift of the others.
class CouplingLayer {
public:
    CouplingLayer(std::size_t obs_dim, std::size_t cond_dim, std::size_t hidden, bool even_passive,
                  double scale_bound, std::mt19937_64& rng);

    const std::vector<bool>& mask() const { return mask_; }
    const std::vector<std::size_t>& passive() const { return passive_; }
    const std::vector<std::size_t>& active() const { return active_; }

    struct Result {
        ad::Var out;
        /// Sum of the log-scales applied to the active coordinates.
        ad::Var log_scale_sum;
    };

    /// y -> yhat: active = (active - shift) * exp(-s). Pass `cond` only in
    /// conditional mode.
    Result inverse(ad::Tape* tape, const ad::Var& y, const std::optional<ad::Var>& cond) const;
    /// yhat -> y: active = active * exp(s) + shift.
    Result forward(ad::Tape* tape, const ad::Var& yhat, const std::optional<ad::Var>& cond) const;

    Mlp& scale_net() { return scale_net_; }
    Mlp& shift_net() { return shift_net_; }
    void append_parameters(const std::string& prefix, ParamList& out);

private:
    struct ScaleShift {
        ad::Var log_scale;
        ad::Var shift;
    };
    ScaleShift conditioner(ad::Tape* tape, const ad::Var& passive_values, const std::optional<ad::Var>& cond) const;

    std::size_t obs_dim_;
    std::size_t cond_dim_;
    double scale_bound_;
    std::vector<bool> mask_;
    std::vector<std::size_t> passive_;
    std::vector<std::size_t> active_;
    Mlp scale_net_;
    Mlp shift_net_;
};

struct FlowInverse {
    ad::Var base;
    ad::Var logdet;
};

class FlowModel {
public:
    FlowModel(FlowConfig config, std::uint64_t seed);

    const FlowConfig& config() const { return config_; }
    std::size_t obs_dim() const { return config_.obs_dim; }
    std::size_t state_dim() const { return config_.state_dim; }
    double sigma() const { return config_.sigma; }

    std::vector<CouplingLayer>& layers() { return layers_; }
    const std::vector<CouplingLayer>& layers() const { return layers_; }
    Mlp& mean_net() { return mean_net_; }

    /// yhat = g^{-1}(y) and log|det J_{g^{-1}}(y)|. `x` is required only in
    /// conditional mode.
    FlowInverse inverse(ad::Tape* tape, const ad::Var& y, const std::optional<ad::Var>& x = std::nullopt) const;
    ad::Var forward(ad::Tape* tape, const ad::Var& yhat, const std::optional<ad::Var>& x = std::nullopt) const;
    ad::Var mean(ad::Tape* tape, const ad::Var& x) const;

    /// log p(y | x), differentiable in the flow, the mean network and x.
    ad::Var observation_loglik(ad::Tape* tape, const ad::Var& y, const ad::Var& x) const;
    double observation_loglik(std::span<const double> y, std::span<const double> x) const;

    template <class Generator>
    std::vector<double> sample_observation(std::span<const double> x, Generator& rng) const;

    ParamList parameters();
    /// Zero every coupling and mean parameter: identity flow, zero mean.
    void set_zero();

private:
    std::optional<ad::Var> conditioning_input(const std::optional<ad::Var>& x) const;

    FlowConfig config_;
    std::vector<CouplingLayer> layers_;
    Mlp mean_net_;
};

/// -D/2 ln(2 pi) - D ln(sigma) - |z - mean|^2 / (2 sigma^2)
ad::Var gaussian_logpdf(const ad::Var& z, const ad::Var& mean, double sigma);
double gaussian_logpdf(std::span<const double> z, std::span<const double> mean, double sigma);

template <class Generator>
std::vector<double> FlowModel::sample_observation(std::span<const double> x, Generator& rng) const {
    auto xv = ad::Var::constant(std::vector<double>(x.begin(), x.end()));
    auto mu = mean(nullptr, xv);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> base(obs_dim());
    for (std::size_t i = 0; i < base.size(); ++i) base[i] = mu[i] + config_.sigma * normal(rng);
    return forward(nullptr, ad::Var::constant(std::move(base)), xv).to_vector();
}

}  // namespace nfpf
