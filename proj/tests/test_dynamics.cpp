#include <doctest.h>

#include <cmath>
#include <random>

#include "nfpf/dynamics.hpp"
#include "nfpf/errors.hpp"
#include "test_util.hpp"

using namespace nfpf;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
    Matrix m(r, c);
    std::uniform_real_distribution<double> u(-1, 1);
    for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
    }
    return m;
}

Vector random_vector(Eigen::Index n, std::mt19937_64& rng) { return random_matrix(n, 1, rng).col(0); }

}  // namespace

TEST_CASE("dynamics_forward normalizes the raw output") {
    std::mt19937_64 rng(0);
    DynamicsNet net(2, 1, 8, rng);
    net.network().set_zero();
    auto bias = net.network().bias(net.network().num_layers() - 1).mutable_data();
    // raw A = 2 I, raw B = [1, 0]^T
    bias[0] = 2;
    bias[3] = 2;
    bias[4] = 1;
    auto m = net.evaluate(Vector::Random(2));
    CHECK((m.A - Matrix::Identity(2, 2) / std::sqrt(2.0)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(m.B(0, 0) == 1.0);
    CHECK(m.B(1, 0) == 0.0);
}

TEST_CASE("dynamics_forward gives unit Frobenius norms for any x") {
    std::mt19937_64 rng(4);
    DynamicsNet net(4, 2, 32, rng);
    for (int i = 0; i < 200; ++i) {
        auto m = net.evaluate(random_vector(4, rng) * 5.0);
        CHECK(std::abs(m.A.norm() - 1.0) < 1e-10);
        CHECK(std::abs(m.B.norm() - 1.0) < 1e-10);
    }
}

TEST_CASE("dynamics_forward without controls") {
    std::mt19937_64 rng(4);
    DynamicsNet net(3, 0, 8, rng);
    auto m = net.evaluate(Vector::Ones(3));
    CHECK(m.B.cols() == 0);
    CHECK(std::abs(m.A.norm() - 1.0) < 1e-12);
}

TEST_CASE("gradient of |A x|^2 matches finite differences") {
    std::mt19937_64 rng(17);
    DynamicsNet net(3, 1, 16, rng);
    auto xv = testutil::uniform_vector(3, rng);
    ParamList params;
    net.append_parameters("dyn", params);
    std::vector<ad::Tensor*> tensors;
    for (auto& p : params) tensors.push_back(p.tensor);
    auto f = [&](ad::Tape* tape) {
        auto x = ad::Var::constant(xv);
        auto out = net.forward(tape, x);
        return ad::sum(ad::square(ad::matvec(out.A, x)));
    };
    CHECK(ad::gradient_check(f, tensors, 1e-6).max_relative_error < 1e-4);
}

TEST_CASE("frobenius_normalize examples") {
    Matrix m(2, 2);
    m << 3, 4, 0, 0;
    auto n = frobenius_normalize(m);
    CHECK(n(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(n(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK((frobenius_normalize(Matrix::Identity(4, 4)) - Matrix::Identity(4, 4) / 2).norm() == 0.0);
    std::mt19937_64 rng(2);
    auto u = frobenius_normalize(random_matrix(3, 3, rng));
    CHECK((frobenius_normalize(u) - u).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(frobenius_normalize(Matrix::Zero(2, 2)), NumericalError);
}

TEST_CASE("predict_mean examples") {
    DynamicsMatrices m{Matrix::Zero(2, 2), Matrix::Zero(2, 0)};
    m.A(0, 0) = 1;
    auto y = predict_mean(m, Vector::Ones(2), Vector(0));
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 0.0);

    std::mt19937_64 rng(3);
    DynamicsMatrices r{random_matrix(3, 3, rng), random_matrix(3, 2, rng)};
    CHECK(predict_mean(r, Vector::Zero(3), Vector::Zero(2)).norm() == 0.0);

    auto x = random_vector(3, rng);
    auto u = random_vector(2, rng);
    auto out = predict_mean(r, x, u);
    for (int i = 0; i < 3; ++i) {
        double acc = 0;
        for (int j = 0; j < 3; ++j) acc += r.A(i, j) * x[j];
        for (int j = 0; j < 2; ++j) acc += r.B(i, j) * u[j];
        CHECK(out[i] == doctest::Approx(acc).epsilon(1e-12));
    }
    CHECK_THROWS_AS(predict_mean(r, Vector::Zero(2), u), DimensionError);
}

TEST_CASE("predict_mean is linear") {
    std::mt19937_64 rng(8);
    DynamicsMatrices r{random_matrix(4, 4, rng), random_matrix(4, 2, rng)};
    for (int i = 0; i < 50; ++i) {
        auto x1 = random_vector(4, rng), x2 = random_vector(4, rng);
        auto u1 = random_vector(2, rng), u2 = random_vector(2, rng);
        Vector lhs = predict_mean(r, x1 + x2, u1 + u2);
        Vector rhs = predict_mean(r, x1, u1) + predict_mean(r, x2, u2);
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-13);
    }
}

TEST_CASE("sample_transition with zero noise equals predict_mean") {
    std::mt19937_64 rng(9);
    DynamicsMatrices r{random_matrix(3, 3, rng), random_matrix(3, 1, rng)};
    NoiseModel noise{Matrix::Zero(3, 3), Vector::Zero(3), Matrix::Identity(3, 3)};
    auto x = random_vector(3, rng);
    Vector u = Vector::Constant(1, 0.4);
    for (int i = 0; i < 10; ++i) CHECK(sample_transition(r, x, u, noise, rng) == predict_mean(r, x, u));
}

TEST_CASE("sample_transition moments") {
    std::mt19937_64 rng(10);
    DynamicsMatrices r{Matrix::Identity(2, 2) * 0.5, Matrix::Ones(2, 1)};
    Vector x(2);
    x << 1.0, -2.0;
    Vector u = Vector::Constant(1, 0.3);
    const Vector mean = predict_mean(r, x, u);
    const int n = 100000;

    NoiseModel unit{Matrix::Identity(2, 2), Vector::Zero(2), Matrix::Identity(2, 2)};
    Vector acc = Vector::Zero(2);
    for (int i = 0; i < n; ++i) acc += sample_transition(r, x, u, unit, rng);
    CHECK(((acc / n) - mean).cwiseAbs().maxCoeff() < 0.02);

    Matrix Q = Matrix::Zero(2, 2);
    Q(0, 0) = 4;
    Q(1, 1) = 1;
    NoiseModel diag{Q, Vector::Zero(2), Matrix::Identity(2, 2)};
    Vector s1 = Vector::Zero(2), s2 = Vector::Zero(2);
    for (int i = 0; i < n; ++i) {
        Vector d = sample_transition(r, x, u, diag, rng) - mean;
        s1 += d;
        s2 += d.cwiseProduct(d);
    }
    Vector var = s2 / n - (s1 / n).cwiseProduct(s1 / n);
    CHECK(std::abs(var[0] / 4.0 - 1.0) < 0.05);
    CHECK(std::abs(var[1] / 1.0 - 1.0) < 0.05);
}

TEST_CASE("non-PSD noise raises a covariance error") {
    Matrix Q = Matrix::Identity(2, 2);
    Q(1, 1) = -1;
    CHECK_THROWS_AS(psd_cholesky(Q), CovarianceError);
    NoiseModel bad{Q, Vector::Zero(2), Matrix::Identity(2, 2)};
    CHECK_THROWS_AS(bad.validate(), CovarianceError);
    Matrix asym = Matrix::Identity(2, 2);
    asym(0, 1) = 0.5;
    CHECK_THROWS_AS(require_psd(asym, "Q"), CovarianceError);
    // Zero pivots are fine.
    Matrix L = psd_cholesky(Matrix::Zero(3, 3));
    CHECK(L.norm() == 0.0);
}

TEST_CASE("spectral_radius examples") {
    Matrix d = Matrix::Zero(2, 2);
    d(0, 0) = 0.5;
    d(1, 1) = 0.25;
    CHECK(spectral_radius(d) == doctest::Approx(0.5).epsilon(1e-14));
    Matrix nil = Matrix::Zero(2, 2);
    nil(0, 1) = 1;
    CHECK(spectral_radius(nil) == 0.0);
    Matrix rot(2, 2);
    rot << std::cos(0.3), -std::sin(0.3), std::sin(0.3), std::cos(0.3);
    CHECK(spectral_radius(0.9 * rot) == doctest::Approx(0.9).epsilon(1e-14));
    // Larger matrices report the spectral norm.
    Matrix big = Matrix::Zero(3, 3);
    big(0, 0) = 0.2;
    big(1, 1) = -0.7;
    big(2, 2) = 0.1;
    CHECK(spectral_radius(big) == doctest::Approx(0.7).epsilon(1e-10));
}

TEST_CASE("unit Frobenius matrices have radius at most one") {
    std::mt19937_64 rng(12);
    for (int d = 1; d <= 6; ++d) {
        for (int i = 0; i < 200; ++i) {
            auto A = frobenius_normalize(random_matrix(d, d, rng));
            CHECK(spectral_radius(A) <= 1.0 + 1e-10);
        }
    }
    // Rank one: equality is attainable.
    Matrix r1 = Matrix::Zero(3, 3);
    r1(0, 0) = 1;
    auto report = diagnose({r1, Matrix::Ones(3, 1) / std::sqrt(3.0)});
    CHECK(report.spectral_radius == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report.marginal);
}

TEST_CASE("spectral_radius agrees with eigenvalues for symmetric matrices") {
    std::mt19937_64 rng(14);
    for (int i = 0; i < 50; ++i) {
        Matrix m = random_matrix(5, 5, rng);
        Matrix s = m + m.transpose();
        Eigen::SelfAdjointEigenSolver<Matrix> es(s);
        CHECK(spectral_radius(s) == doctest::Approx(es.eigenvalues().cwiseAbs().maxCoeff()).epsilon(1e-10));
    }
}

TEST_CASE("controllability_rank examples") {
    Matrix b(2, 1);
    b << 1, 0;
    CHECK(controllability_rank(Matrix::Identity(2, 2), b) == 1);
    Matrix A = Matrix::Zero(2, 2);
    A(0, 1) = 1;
    Matrix b2(2, 1);
    b2 << 0, 1;
    CHECK(controllability_rank(A, b2) == 2);
    CHECK(controllability_rank(A, Matrix::Zero(2, 1)) == 0);
}

TEST_CASE("controllability_rank is invariant under scaling B") {
    std::mt19937_64 rng(15);
    for (int i = 0; i < 50; ++i) {
        Matrix A = random_matrix(4, 4, rng);
        Matrix B = random_matrix(4, 1, rng);
        const auto r = controllability_rank(A, B);
        CHECK(controllability_rank(A, B * 1e-3) == r);
        CHECK(controllability_rank(A, B * -250.0) == r);
    }
}

TEST_CASE("dynamics model step_mean matches predict_mean") {
    std::mt19937_64 rng(16);
    DynamicsNet net(3, 2, 8, rng);
    DynamicsModel model(std::move(net), NoiseModel::defaults(3));
    auto x = random_vector(3, rng);
    auto u = random_vector(2, rng);
    auto m = model.matrices_at(x);
    auto expected = predict_mean(m, x, u);
    auto got = model.step_mean(nullptr, ad::Var::constant({x.data(), x.data() + 3}),
                               ad::Var::constant({u.data(), u.data() + 2}));
    for (int i = 0; i < 3; ++i) CHECK(got[static_cast<std::size_t>(i)] == doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("noise model defaults") {
    auto n = NoiseModel::defaults(4);
    CHECK(n.Q.isApprox(1e-4 * Matrix::Identity(4, 4)));
    CHECK(n.mu0.norm() == 0.0);
    CHECK(n.sigma0.isIdentity());
}
