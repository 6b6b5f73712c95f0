#include "nfpf/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>

#include "nfpf/errors.hpp"

namespace nfpf {

Matrix psd_cholesky(const Matrix& cov, double tol) {
    if (cov.rows() != cov.cols()) throw DimensionError("covariance must be square");
    const Eigen::Index n = cov.rows();
    const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < i; ++j) {
            if (std::abs(cov(i, j) - cov(j, i)) > tol * scale) {
                throw CovarianceError("covariance is not symmetric");
            }
        }
    }
    Matrix L = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double pivot = cov(j, j);
        for (Eigen::Index k = 0; k < j; ++k) pivot -= L(j, k) * L(j, k);
        if (pivot < -tol * scale) {
            throw CovarianceError("covariance is not positive semi-definite (pivot " + std::to_string(pivot) +
                                  " at index " + std::to_string(j) + ")");
        }
        if (pivot <= tol * scale) {
            // Rank-deficient direction: the remaining column must vanish too.
            for (Eigen::Index i = j + 1; i < n; ++i) {
                double off = cov(i, j);
                for (Eigen::Index k = 0; k < j; ++k) off -= L(i, k) * L(j, k);
                if (std::abs(off) > std::sqrt(tol) * scale) {
                    throw CovarianceError("covariance is not positive semi-definite");
                }
            }
            continue;
        }
        const double root = std::sqrt(pivot);
        L(j, j) = root;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double off = cov(i, j);
            for (Eigen::Index k = 0; k < j; ++k) off -= L(i, k) * L(j, k);
            L(i, j) = off / root;
        }
    }
    return L;
}

void require_psd(const Matrix& cov, const char* what, double tol) {
    if (cov.rows() != cov.cols()) throw DimensionError(std::string(what) + " must be square");
    if (!cov.allFinite()) throw CovarianceError(std::string(what) + " has non-finite entries");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > tol * std::max(1.0, cov.cwiseAbs().maxCoeff())) {
        throw CovarianceError(std::string(what) + " is not symmetric");
    }
    if (cov.rows() == 0) return;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -tol) {
        throw CovarianceError(std::string(what) + " has a negative eigenvalue " +
                              std::to_string(eig.eigenvalues().minCoeff()));
    }
}

NoiseModel NoiseModel::defaults(std::size_t state_dim, double q_scale) {
    const auto d = static_cast<Eigen::Index>(state_dim);
    return {q_scale * Matrix::Identity(d, d), Vector::Zero(d), Matrix::Identity(d, d)};
}

void NoiseModel::validate() const {
    if (Q.rows() != mu0.size() || sigma0.rows() != mu0.size()) {
        throw DimensionError("noise model dimensions disagree: Q " + std::to_string(Q.rows()) + ", mu0 " +
                             std::to_string(mu0.size()) + ", sigma0 " + std::to_string(sigma0.rows()));
    }
    require_psd(Q, "process noise Q");
    require_psd(sigma0, "initial covariance sigma0");
}

// ---------------------------------------------------------------------------

DynamicsNet::DynamicsNet(std::size_t state_dim, std::size_t control_dim, std::size_t hidden,
                         std::mt19937_64& rng)
    : state_dim_(state_dim),
      control_dim_(control_dim),
      net_({state_dim, hidden, state_dim * state_dim + state_dim * control_dim}, rng) {
    if (state_dim == 0) throw ConfigError("latent dimension must be positive");
    // With zero biases the output vanishes at x = 0 (the default mu0) and A
    // cannot be normalized. Start the output bias at raw A = I, raw B = 1.
    auto bias = net_.bias(net_.num_layers() - 1).mutable_data();
    for (std::size_t i = 0; i < state_dim; ++i) bias[i * state_dim + i] = 1.0;
    for (std::size_t i = state_dim * state_dim; i < bias.size(); ++i) bias[i] = 1.0;
}

ad::Var DynamicsNet::raw(ad::Tape* tape, const ad::Var& x) const {
    if (x.size() != state_dim_) {
        throw DimensionError("dynamics net expects a state of size " + std::to_string(state_dim_) + ", got " +
                             std::to_string(x.size()));
    }
    auto out = net_.forward(tape, x);
    if (!ad::all_finite(out.value())) throw NumericalError("dynamics network produced non-finite output");
    return out;
}

DynamicsOutput DynamicsNet::forward(ad::Tape* tape, const ad::Var& x) const {
    const std::size_t d = state_dim_;
    const std::size_t m = control_dim_;
    auto out = raw(tape, x);
    auto A = ad::frobenius_normalize(ad::reshape(ad::slice(out, 0, d * d), {d, d}));
    ad::Var B;
    if (m > 0) B = ad::frobenius_normalize(ad::reshape(ad::slice(out, d * d, d * m), {d, m}));
    return {A, B};
}

namespace {

Matrix to_matrix(const ad::Var& v, std::size_t rows, std::size_t cols) {
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (rows * cols == 0) return m;
    auto values = v.value();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * cols + j];
        }
    }
    return m;
}

ad::Var to_var(const Vector& v) { return ad::Var::constant(std::vector<double>(v.data(), v.data() + v.size())); }

}  // namespace

DynamicsMatrices DynamicsNet::evaluate(const Vector& x) const {
    auto out = forward(nullptr, to_var(x));
    return {to_matrix(out.A, state_dim_, state_dim_), to_matrix(out.B, state_dim_, control_dim_)};
}

// ---------------------------------------------------------------------------

DynamicsModel::DynamicsModel(DynamicsNet net, NoiseModel noise) : net_(std::move(net)), noise_(std::move(noise)) {
    noise_.validate();
    if (static_cast<std::size_t>(noise_.mu0.size()) != net_->state_dim()) {
        throw DimensionError("noise model dimension does not match dynamics network");
    }
    noise_factor_ = psd_cholesky(noise_.Q);
}

DynamicsModel::DynamicsModel(DynamicsMatrices fixed, NoiseModel noise)
    : fixed_(std::move(fixed)), noise_(std::move(noise)) {
    noise_.validate();
    if (fixed_->A.rows() != fixed_->A.cols() || fixed_->B.rows() != fixed_->A.rows() ||
        fixed_->A.rows() != noise_.mu0.size()) {
        throw DimensionError("fixed dynamics matrices do not conform with the noise model");
    }
    noise_factor_ = psd_cholesky(noise_.Q);
}

std::size_t DynamicsModel::state_dim() const { return static_cast<std::size_t>(noise_.mu0.size()); }

std::size_t DynamicsModel::control_dim() const {
    return net_ ? net_->control_dim() : static_cast<std::size_t>(fixed_->B.cols());
}

DynamicsMatrices DynamicsModel::matrices_at(const Vector& x) const {
    if (net_) return net_->evaluate(x);
    return *fixed_;
}

ad::Var DynamicsModel::step_mean(ad::Tape* tape, const ad::Var& x, const ad::Var& u) const {
    if (u.size() != control_dim()) {
        throw DimensionError("control of size " + std::to_string(u.size()) + " for a model with " +
                             std::to_string(control_dim()) + " inputs");
    }
    const std::size_t d = state_dim();
    const std::size_t m = control_dim();
    ad::Var A;
    ad::Var B;
    if (net_) {
        auto out = net_->forward(tape, x);
        A = out.A;
        B = out.B;
    } else {
        // Eigen is column-major; copy row-major.
        std::vector<double> a(d * d);
        std::vector<double> b(d * m);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) a[i * d + j] = fixed_->A(i, j);
            for (std::size_t j = 0; j < m; ++j) b[i * m + j] = fixed_->B(i, j);
        }
        A = ad::Var::constant(std::move(a), {d, d});
        if (m > 0) B = ad::Var::constant(std::move(b), {d, m});
    }
    auto next = ad::matvec(A, x);
    if (m > 0) next = ad::add(next, ad::matvec(B, u));
    return next;
}

ParamList DynamicsModel::parameters() {
    ParamList out;
    if (net_) net_->append_parameters("dynamics", out);
    return out;
}

// ---------------------------------------------------------------------------

Matrix frobenius_normalize(const Matrix& m, double min_norm) {
    const double norm = m.norm();
    if (!(norm > min_norm)) {
        throw NumericalError("degenerate matrix: Frobenius norm " + std::to_string(norm) + " is below " +
                             std::to_string(min_norm));
    }
    return m / norm;
}

Vector predict_mean(const DynamicsMatrices& m, const Vector& x, const Vector& u) {
    if (m.A.rows() != m.A.cols() || m.A.cols() != x.size() || m.B.rows() != m.A.rows() || m.B.cols() != u.size()) {
        throw DimensionError("predict_mean: A " + std::to_string(m.A.rows()) + "x" + std::to_string(m.A.cols()) +
                             ", B " + std::to_string(m.B.rows()) + "x" + std::to_string(m.B.cols()) + ", x " +
                             std::to_string(x.size()) + ", u " + std::to_string(u.size()));
    }
    Vector out = m.A * x;
    if (u.size() > 0) out += m.B * u;
    return out;
}

double spectral_radius(const Matrix& A) {
    if (A.rows() != A.cols()) throw DimensionError("spectral_radius needs a square matrix");
    const Eigen::Index d = A.rows();
    if (d == 0) return 0.0;
    if (d == 1) return std::abs(A(0, 0));
    if (d == 2) {
        const double tr = A(0, 0) + A(1, 1);
        const double det = A(0, 0) * A(1, 1) - A(0, 1) * A(1, 0);
        const double disc = tr * tr / 4.0 - det;
        if (disc >= 0.0) {
            const double r = std::sqrt(disc);
            return std::max(std::abs(tr / 2.0 + r), std::abs(tr / 2.0 - r));
        }
        // Complex pair: |lambda|^2 = det.
        return std::sqrt(det);
    }

    const Matrix gram = A.transpose() * A;
    // Fixed irregular start so it is not orthogonal to structured singular vectors.
    Vector v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * std::sin(1.0 + static_cast<double>(i) * 2.399);
    v.normalize();
    double lambda = 0.0;
    for (int iter = 0; iter < 10000; ++iter) {
        Vector w = gram * v;
        const double next = v.dot(w);
        const double norm = w.norm();
        if (norm == 0.0) return 0.0;
        v = w / norm;
        if (std::abs(next - lambda) <= 1e-13 * std::max(1.0, std::abs(next))) {
            return std::sqrt(std::max(next, 0.0));
        }
        lambda = next;
    }
    throw ConvergenceError("spectral_radius: power iteration did not converge in 10000 steps");
}

std::size_t controllability_rank(const Matrix& A, const Matrix& B, double rel_tol) {
    if (A.rows() != A.cols() || B.rows() != A.rows()) {
        throw DimensionError("controllability_rank: A " + std::to_string(A.rows()) + "x" +
                             std::to_string(A.cols()) + " and B " + std::to_string(B.rows()) + "x" +
                             std::to_string(B.cols()) + " do not conform");
    }
    const Eigen::Index d = A.rows();
    const Eigen::Index m = B.cols();
    if (d == 0 || m == 0) return 0;
    Matrix ctrb(d, d * m);
    Matrix block = B;
    for (Eigen::Index k = 0; k < d; ++k) {
        ctrb.middleCols(k * m, m) = block;
        block = A * block;
    }
    Eigen::JacobiSVD<Matrix> svd(ctrb);
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s[0] == 0.0) return 0;
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s[i] > rel_tol * s[0]) ++rank;
    }
    return rank;
}

StabilityReport diagnose(const DynamicsMatrices& m) {
    StabilityReport r;
    r.frobenius_A = m.A.norm();
    r.frobenius_B = m.B.norm();
    r.spectral_radius = spectral_radius(m.A);
    r.controllability_rank = controllability_rank(m.A, m.B);
    r.marginal = r.spectral_radius > 1.0 - 1e-6;
    return r;
}

}  // namespace nfpf
