#include "nfpf/filters.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "nfpf/errors.hpp"

namespace nfpf {

// ---------------------------------------------------------------------------
// Kalman filter

GaussianBelief kalman_predict(const GaussianBelief& belief, const Matrix& A, const Matrix& B, const Vector& u,
                              const Matrix& Q) {
    const auto d = belief.mean.size();
    if (A.rows() != d || A.cols() != d || Q.rows() != d || Q.cols() != d || B.rows() != d || B.cols() != u.size() ||
        belief.cov.rows() != d) {
        throw DimensionError("kalman_predict: dimensions do not conform");
    }
    GaussianBelief out;
    out.mean = A * belief.mean;
    if (u.size() > 0) out.mean += B * u;
    Matrix cov = A * belief.cov * A.transpose() + Q;
    out.cov = 0.5 * (cov + cov.transpose());
    return out;
}

GaussianBelief kalman_update(const GaussianBelief& belief, const Matrix& H, const Matrix& R, const Vector& y) {
    const auto d = belief.mean.size();
    const auto k = y.size();
    if (H.rows() != k || H.cols() != d || R.rows() != k || R.cols() != k) {
        throw DimensionError("kalman_update: dimensions do not conform");
    }
    const Matrix S = H * belief.cov * H.transpose() + R;
    Eigen::LDLT<Matrix> ldlt(S);
    if (ldlt.info() != Eigen::Success || !S.allFinite() || ldlt.vectorD().minCoeff() <= 0.0) {
        throw NumericalError("kalman_update: singular innovation covariance");
    }
    // K = P H^T S^{-1}, computed as (S^{-1} H P)^T since S and P are symmetric.
    const Matrix K = ldlt.solve(H * belief.cov).transpose();
    const Matrix I_KH = Matrix::Identity(d, d) - K * H;
    GaussianBelief out;
    out.mean = belief.mean + K * (y - H * belief.mean);
    Matrix cov = I_KH * belief.cov * I_KH.transpose() + K * R * K.transpose();
    out.cov = 0.5 * (cov + cov.transpose());
    return out;
}

KalmanTrace kalman_filter(const LinGaussSystem& sys, const Trajectory& traj) {
    sys.validate();
    if (traj.obs_dim() != sys.obs_dim() || traj.control_dim() != sys.control_dim()) {
        throw DataError("trajectory dimensions do not match the linear-Gaussian system");
    }
    KalmanTrace trace;
    GaussianBelief belief{sys.mu0, sys.sigma0};
    Vector u = Vector::Zero(static_cast<Eigen::Index>(sys.control_dim()));
    for (std::size_t t = 0; t < traj.length(); ++t) {
        belief = kalman_predict(belief, sys.A, sys.B, u, sys.Q);
        const Vector y = traj.observation(t);
        trace.innovations.push_back(y - sys.H * belief.mean);
        trace.innovation_covs.push_back(sys.H * belief.cov * sys.H.transpose() + sys.R);
        belief = kalman_update(belief, sys.H, sys.R, y);
        trace.filtered.push_back(belief);
        u = traj.control(t);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Particle filter

LogLikelihood linear_gaussian_loglik(const Matrix& H, const Matrix& R) {
    require_psd(R, "observation noise R");
    Eigen::LLT<Matrix> llt(R);
    if (llt.info() != Eigen::Success) throw CovarianceError("observation noise R must be positive definite");
    const Matrix L = llt.matrixL();
    const double log_det = 2.0 * L.diagonal().array().log().sum();
    const double constant = -0.5 * static_cast<double>(R.rows()) * std::log(2.0 * std::numbers::pi) - 0.5 * log_det;
    return [H, L, constant](const Vector& y, const Vector& x) {
        const Vector r = y - H * x;
        const Vector z = L.triangularView<Eigen::Lower>().solve(r);
        return constant - 0.5 * z.squaredNorm();
    };
}

ParticleSet pf_init(std::size_t N, const Vector& mu0, const Matrix& sigma0, std::uint64_t seed) {
    if (N == 0) throw ConfigError("particle count must be at least 1");
    if (sigma0.rows() != mu0.size() || sigma0.cols() != mu0.size()) {
        throw DimensionError("pf_init: mean and covariance dimensions differ");
    }
    const Matrix L = psd_cholesky(sigma0);
    const auto n = static_cast<Eigen::Index>(N);
    const auto d = mu0.size();
    ParticleSet ps;
    ps.states.resize(n, d);
    ps.weights = Vector::Constant(n, 1.0 / static_cast<double>(N));
    parallel_for(N, [&](std::size_t i) {
        Rng rng = Rng::stream(seed, kInitStream, i);
        std::normal_distribution<double> normal(0.0, 1.0);
        Vector z(d);
        for (Eigen::Index k = 0; k < d; ++k) z[k] = normal(rng);
        ps.states.row(static_cast<Eigen::Index>(i)) = (mu0 + L * z).transpose();
    });
    return ps;
}

ParticleSet pf_predict(const ParticleSet& ps, const DynamicsModel& dynamics, const Vector& u, std::uint64_t seed,
                       std::size_t step, bool at_mean) {
    if (ps.dim() != dynamics.state_dim()) {
        throw DimensionError("pf_predict: particles have dimension " + std::to_string(ps.dim()) +
                             ", dynamics expects " + std::to_string(dynamics.state_dim()));
    }
    if (static_cast<std::size_t>(u.size()) != dynamics.control_dim()) {
        throw DimensionError("pf_predict: control dimension mismatch");
    }
    ParticleSet out;
    out.states.resize(ps.states.rows(), ps.states.cols());
    out.weights = ps.weights;
    const bool shared = at_mean || !dynamics.learned();
    std::optional<DynamicsMatrices> common;
    if (shared) common = dynamics.matrices_at(posterior_mean(ps));
    const std::uint64_t stream = 4 * static_cast<std::uint64_t>(step) + kPredictStream;
    parallel_for(ps.size(), [&](std::size_t i) {
        Rng rng = Rng::stream(seed, stream, i);
        const Vector x = ps.particle(i);
        Vector next = common ? sample_transition(*common, x, u, dynamics.noise_factor(), rng)
                             : sample_transition(dynamics.matrices_at(x), x, u, dynamics.noise_factor(), rng);
        out.states.row(static_cast<Eigen::Index>(i)) = next.transpose();
    });
    return out;
}

ParticleSet pf_weight_update(const ParticleSet& ps, std::span<const double> logliks, std::size_t step) {
    if (logliks.size() != ps.size()) throw DimensionError("pf_weight_update: one log-likelihood per particle");
    const std::size_t N = ps.size();
    std::vector<double> logw(N);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N; ++i) {
        if (std::isnan(logliks[i]) || logliks[i] == std::numeric_limits<double>::infinity()) {
            throw NumericalError("invalid log-likelihood for particle " + std::to_string(i) + " at step " +
                                 std::to_string(step));
        }
        const double w = ps.weights[static_cast<Eigen::Index>(i)];
        logw[i] = w > 0.0 ? std::log(w) + logliks[i] : -std::numeric_limits<double>::infinity();
        best = std::max(best, logw[i]);
    }
    if (best == -std::numeric_limits<double>::infinity()) {
        throw DegeneracyError("all particle likelihoods vanished at step " + std::to_string(step));
    }
    ParticleSet out;
    out.states = ps.states;
    out.weights.resize(static_cast<Eigen::Index>(N));
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double w = std::exp(logw[i] - best);
        out.weights[static_cast<Eigen::Index>(i)] = w;
        total += w;
    }
    out.weights /= total;
    return out;
}

ParticleSet pf_weight_update(const ParticleSet& ps, const LogLikelihood& loglik, const Vector& y, std::size_t step) {
    std::vector<double> ll(ps.size());
    parallel_for(ps.size(), [&](std::size_t i) { ll[i] = loglik(y, ps.particle(i)); });
    return pf_weight_update(ps, ll, step);
}

double ess(const ParticleSet& ps) {
    const double s = ps.weights.squaredNorm();
    return s > 0.0 ? 1.0 / s : 0.0;
}

std::vector<std::size_t> systematic_counts(std::span<const double> weights, double offset) {
    const std::size_t N = weights.size();
    std::vector<std::size_t> counts(N, 0);
    if (N == 0) return counts;
    double cumulative = weights[0];
    std::size_t j = 0;
    for (std::size_t k = 0; k < N; ++k) {
        const double position = (static_cast<double>(k) + offset) / static_cast<double>(N);
        while (position >= cumulative && j + 1 < N) cumulative += weights[++j];
        ++counts[j];
    }
    return counts;
}

ParticleSet systematic_resample(const ParticleSet& ps, Rng& rng) {
    const std::size_t N = ps.size();
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const double offset = uniform(rng);
    auto counts = systematic_counts({ps.weights.data(), N}, offset);
    ParticleSet out;
    out.states.resize(ps.states.rows(), ps.states.cols());
    out.weights = Vector::Constant(static_cast<Eigen::Index>(N), 1.0 / static_cast<double>(N));
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < counts[i]; ++c) out.states.row(row++) = ps.states.row(static_cast<Eigen::Index>(i));
    }
    return out;
}

Vector posterior_mean(const ParticleSet& ps) {
    Vector mean = Vector::Zero(ps.states.cols());
    for (Eigen::Index i = 0; i < ps.states.rows(); ++i) mean += ps.weights[i] * ps.states.row(i).transpose();
    return mean;
}

void FilterConfig::validate() const {
    if (particles == 0) throw ConfigError("particle count must be at least 1");
    if (!(resample_threshold >= 0.0 && resample_threshold <= 1.0)) {
        throw ConfigError("resample threshold must lie in [0, 1]");
    }
}

FilterTrace run_filter(const Trajectory& traj, const LogLikelihood& loglik, const DynamicsModel& dynamics,
                       const FilterConfig& cfg) {
    cfg.validate();
    FilterTrace trace;
    trace.state_dim = dynamics.state_dim();
    if (traj.length() == 0) return trace;
    if (traj.control_dim() != dynamics.control_dim()) {
        throw DataError("trajectory has " + std::to_string(traj.control_dim()) + " controls, model expects " +
                        std::to_string(dynamics.control_dim()));
    }

    const auto& noise = dynamics.noise();
    ParticleSet ps = pf_init(cfg.particles, noise.mu0, noise.sigma0, cfg.seed);
    Vector u = Vector::Zero(static_cast<Eigen::Index>(dynamics.control_dim()));
    const double threshold = cfg.resample_threshold * static_cast<double>(cfg.particles);
    for (std::size_t t = 0; t < traj.length(); ++t) {
        ps = pf_predict(ps, dynamics, u, cfg.seed, t, cfg.evaluate_at_mean);
        ps = pf_weight_update(ps, loglik, traj.observation(t), t);

        FilterStep step;
        step.mean = posterior_mean(ps);
        step.ess = ess(ps);
        if (cfg.keep_weights) step.weights = ps.weights;
        if (step.ess < threshold) {
            Rng rng = Rng::stream(cfg.seed, 4 * static_cast<std::uint64_t>(t) + kResampleStream, 0);
            ps = systematic_resample(ps, rng);
            step.resampled = true;
        }
        trace.steps.push_back(std::move(step));
        u = traj.control(t);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Trace CSV

namespace {

void append_number(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

double parse_field(const std::string& s, const std::filesystem::path& path) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw DataError(path.string() + ": bad number '" + s + "'");
    return v;
}

}  // namespace

void write_trace_csv(const std::filesystem::path& path, const FilterTrace& trace, const Trajectory* truth) {
    if (truth && truth->has_truth() && truth->length() != trace.steps.size()) {
        throw DataError("trace and ground truth have different lengths");
    }
    const bool with_truth = truth && truth->has_truth();
    std::string text = "t";
    for (std::size_t i = 0; i < trace.state_dim; ++i) text += ",mean_" + std::to_string(i);
    text += ",ess,resampled";
    if (with_truth) {
        for (std::size_t i = 0; i < truth->env_state_dim(); ++i) text += ",true_" + std::to_string(i);
    }
    text += '\n';
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        const auto& step = trace.steps[t];
        text += std::to_string(t);
        for (Eigen::Index i = 0; i < step.mean.size(); ++i) {
            text += ',';
            append_number(text, step.mean[i]);
        }
        text += ',';
        append_number(text, step.ess);
        text += step.resampled ? ",1" : ",0";
        if (with_truth) {
            for (Eigen::Index i = 0; i < truth->true_states.cols(); ++i) {
                text += ',';
                append_number(text, truth->true_states(static_cast<Eigen::Index>(t), i));
            }
        }
        text += '\n';
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write trace " + path.string());
    out << text;
    if (!out) throw IoError("failed writing trace " + path.string());
}

TraceTable read_trace_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open trace " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty trace file " + path.string());
    const auto header = split_csv(line);

    TraceTable table;
    std::size_t col = 0;
    if (header.empty() || header[col++] != "t") throw DataError(path.string() + ": first column must be t");
    while (col < header.size() && header[col] == "mean_" + std::to_string(table.state_dim)) {
        ++table.state_dim;
        ++col;
    }
    if (col + 2 > header.size() || header[col] != "ess" || header[col + 1] != "resampled") {
        throw DataError(path.string() + ": expected ess and resampled columns after the means");
    }
    col += 2;
    while (col < header.size() && header[col] == "true_" + std::to_string(table.truth_dim)) {
        ++table.truth_dim;
        ++col;
    }
    if (col != header.size()) throw DataError(path.string() + ": unexpected column '" + header[col] + "'");

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != header.size()) {
            throw DataError(path.string() + ": row has " + std::to_string(fields.size()) + " columns, header has " +
                            std::to_string(header.size()));
        }
        std::size_t k = 0;
        table.t.push_back(static_cast<std::size_t>(parse_field(fields[k++], path)));
        Vector mean(static_cast<Eigen::Index>(table.state_dim));
        for (Eigen::Index i = 0; i < mean.size(); ++i) mean[i] = parse_field(fields[k++], path);
        table.means.push_back(std::move(mean));
        table.ess.push_back(parse_field(fields[k++], path));
        table.resampled.push_back(parse_field(fields[k++], path) != 0.0);
        if (table.truth_dim > 0) {
            Vector truth(static_cast<Eigen::Index>(table.truth_dim));
            for (Eigen::Index i = 0; i < truth.size(); ++i) truth[i] = parse_field(fields[k++], path);
            table.truth.push_back(std::move(truth));
        }
    }
    return table;
}

}  // namespace nfpf
