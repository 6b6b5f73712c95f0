#include "nfpf/flow.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "nfpf/errors.hpp"

namespace nfpf {

void FlowConfig::validate() const {
    if (obs_dim < 2) throw ConfigError("flow needs an observation dimension of at least 2");
    if (state_dim == 0) throw ConfigError("latent dimension must be positive");
    if (layers == 0) throw ConfigError("flow needs at least one coupling layer");
    if (coupling_hidden == 0 || mean_hidden == 0) throw ConfigError("hidden sizes must be positive");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be positive");
    if (!(scale_bound > 0.0)) throw ConfigError("scale bound must be positive");
}

// ---------------------------------------------------------------------------

CouplingLayer::CouplingLayer(std::size_t obs_dim, std::size_t cond_dim, std::size_t hidden, bool even_passive,
                             double scale_bound, std::mt19937_64& rng)
    : obs_dim_(obs_dim), cond_dim_(cond_dim), scale_bound_(scale_bound), mask_(obs_dim) {
    for (std::size_t i = 0; i < obs_dim; ++i) {
        mask_[i] = (i % 2 == 0) == even_passive;
        (mask_[i] ? passive_ : active_).push_back(i);
    }
    if (passive_.empty() || active_.empty()) throw ConfigError("coupling mask must split the coordinates");
    scale_net_ = Mlp({passive_.size() + cond_dim, hidden, active_.size()}, rng);
    shift_net_ = Mlp({passive_.size() + cond_dim, hidden, active_.size()}, rng);
}

CouplingLayer::ScaleShift CouplingLayer::conditioner(ad::Tape* tape, const ad::Var& passive_values,
                                                     const std::optional<ad::Var>& cond) const {
    ad::Var input = passive_values;
    if (cond_dim_ > 0) {
        if (!cond || cond->size() != cond_dim_) {
            throw DimensionError("conditional coupling layer expects a latent state of size " +
                                 std::to_string(cond_dim_));
        }
        input = ad::concat(passive_values, *cond);
    }
    auto log_scale = ad::scale(ad::tanh(scale_net_.forward(tape, input)), scale_bound_);
    auto shift = shift_net_.forward(tape, input);
    return {log_scale, shift};
}

CouplingLayer::Result CouplingLayer::inverse(ad::Tape* tape, const ad::Var& y,
                                             const std::optional<ad::Var>& cond) const {
    auto fixed = ad::gather(y, passive_);
    auto moving = ad::gather(y, active_);
    auto [log_scale, shift] = conditioner(tape, fixed, cond);
    auto transformed = ad::mul(ad::sub(moving, shift), ad::exp(ad::scale(log_scale, -1.0)));
    return {ad::merge(obs_dim_, fixed, passive_, transformed, active_), ad::sum(log_scale)};
}

CouplingLayer::Result CouplingLayer::forward(ad::Tape* tape, const ad::Var& yhat,
                                             const std::optional<ad::Var>& cond) const {
    auto fixed = ad::gather(yhat, passive_);
    auto moving = ad::gather(yhat, active_);
    auto [log_scale, shift] = conditioner(tape, fixed, cond);
    auto transformed = ad::add(ad::mul(moving, ad::exp(log_scale)), shift);
    return {ad::merge(obs_dim_, fixed, passive_, transformed, active_), ad::sum(log_scale)};
}

void CouplingLayer::append_parameters(const std::string& prefix, ParamList& out) {
    scale_net_.append_parameters(prefix + ".scale", out);
    shift_net_.append_parameters(prefix + ".shift", out);
}

// ---------------------------------------------------------------------------

FlowModel::FlowModel(FlowConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t cond_dim = config_.conditioning == Conditioning::CouplingLayers ? config_.state_dim : 0;
    for (std::size_t l = 0; l < config_.layers; ++l) {
        layers_.emplace_back(config_.obs_dim, cond_dim, config_.coupling_hidden, l % 2 == 0, config_.scale_bound,
                             rng);
    }
    mean_net_ = Mlp({config_.state_dim, config_.mean_hidden, config_.obs_dim}, rng);
}

std::optional<ad::Var> FlowModel::conditioning_input(const std::optional<ad::Var>& x) const {
    if (config_.conditioning == Conditioning::MeanOnly) return std::nullopt;
    if (!x) throw UsageError("conditional flow evaluated without a latent state");
    return x;
}

FlowInverse FlowModel::inverse(ad::Tape* tape, const ad::Var& y, const std::optional<ad::Var>& x) const {
    if (y.size() != obs_dim()) {
        throw DimensionError("flow expects observations of size " + std::to_string(obs_dim()) + ", got " +
                             std::to_string(y.size()));
    }
    auto cond = conditioning_input(x);
    ad::Var h = y;
    ad::Var logdet = ad::Var::scalar(0.0);
    // Generative order is layers_[0], ..., layers_[L-1]; invert back to front.
    for (std::size_t l = layers_.size(); l-- > 0;) {
        auto r = layers_[l].inverse(tape, h, cond);
        h = r.out;
        logdet = ad::sub(logdet, r.log_scale_sum);
    }
    if (!ad::all_finite(h.value()) || !std::isfinite(logdet.item())) {
        throw NumericalError("flow inverse produced non-finite values");
    }
    return {h, logdet};
}

ad::Var FlowModel::forward(ad::Tape* tape, const ad::Var& yhat, const std::optional<ad::Var>& x) const {
    if (yhat.size() != obs_dim()) {
        throw DimensionError("flow expects base variables of size " + std::to_string(obs_dim()) + ", got " +
                             std::to_string(yhat.size()));
    }
    auto cond = conditioning_input(x);
    ad::Var h = yhat;
    for (const auto& layer : layers_) h = layer.forward(tape, h, cond).out;
    if (!ad::all_finite(h.value())) throw NumericalError("flow forward produced non-finite values");
    return h;
}

ad::Var FlowModel::mean(ad::Tape* tape, const ad::Var& x) const {
    if (x.size() != state_dim()) {
        throw DimensionError("mean network expects a latent state of size " + std::to_string(state_dim()) +
                             ", got " + std::to_string(x.size()));
    }
    return mean_net_.forward(tape, x);
}

ad::Var FlowModel::observation_loglik(ad::Tape* tape, const ad::Var& y, const ad::Var& x) const {
    auto inv = inverse(tape, y, x);
    return ad::add(gaussian_logpdf(inv.base, mean(tape, x), config_.sigma), inv.logdet);
}

double FlowModel::observation_loglik(std::span<const double> y, std::span<const double> x) const {
    return observation_loglik(nullptr, ad::Var::constant(std::vector<double>(y.begin(), y.end())),
                              ad::Var::constant(std::vector<double>(x.begin(), x.end())))
        .item();
}

ParamList FlowModel::parameters() {
    ParamList out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].append_parameters("flow.layer" + std::to_string(l), out);
    }
    mean_net_.append_parameters("flow.mean", out);
    return out;
}

void FlowModel::set_zero() {
    for (auto& layer : layers_) {
        layer.scale_net().set_zero();
        layer.shift_net().set_zero();
    }
    mean_net_.set_zero();
}

// ---------------------------------------------------------------------------

namespace {

void check_sigma(double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian_logpdf: sigma must be positive, got " + std::to_string(sigma));
}

double log_normalizer(std::size_t dim, double sigma) {
    const double d = static_cast<double>(dim);
    return -0.5 * d * std::log(2.0 * std::numbers::pi) - d * std::log(sigma);
}

}  // namespace

ad::Var gaussian_logpdf(const ad::Var& z, const ad::Var& mean, double sigma) {
    check_sigma(sigma);
    if (z.size() != mean.size()) {
        throw DimensionError("gaussian_logpdf: dimension mismatch " + std::to_string(z.size()) + " vs " +
                             std::to_string(mean.size()));
    }
    auto quad = ad::sum(ad::square(ad::sub(z, mean)));
    return ad::add_scalar(ad::scale(quad, -0.5 / (sigma * sigma)), log_normalizer(z.size(), sigma));
}

double gaussian_logpdf(std::span<const double> z, std::span<const double> mean, double sigma) {
    check_sigma(sigma);
    if (z.size() != mean.size()) throw DimensionError("gaussian_logpdf: dimension mismatch");
    double quad = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) quad += (z[i] - mean[i]) * (z[i] - mean[i]);
    return quad * (-0.5 / (sigma * sigma)) + log_normalizer(z.size(), sigma);
}

}  // namespace nfpf
