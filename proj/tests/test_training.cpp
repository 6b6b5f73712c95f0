#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <random>

#include "nfpf/checkpoint.hpp"
#include "nfpf/errors.hpp"
#include "nfpf/training.hpp"
#include "test_util.hpp"

using namespace nfpf;
using ad::Var;

namespace {

FlowConfig toy_flow(std::size_t D, std::size_t d, Conditioning c = Conditioning::MeanOnly) {
    FlowConfig cfg;
    cfg.obs_dim = D;
    cfg.state_dim = d;
    cfg.layers = 2;
    cfg.coupling_hidden = 8;
    cfg.mean_hidden = 8;
    cfg.conditioning = c;
    return cfg;
}

Trajectory toy_trajectory(std::size_t T, std::size_t D, std::size_t m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    Trajectory traj;
    traj.observations = RowMatrix(T, D);
    traj.controls = RowMatrix(T, m);
    traj.true_states = RowMatrix(T, 0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < D; ++j) traj.observations(t, j) = u(rng);
        for (std::size_t j = 0; j < m; ++j) traj.controls(t, j) = u(rng);
    }
    traj.dt = 1.0;
    traj.seed = seed;
    return traj;
}

void perturb_biases(ParamList params, std::mt19937_64& rng, double scale = 0.3) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& p : params) {
        if (p.name.find(".b") != std::string::npos) {
            for (double& v : p.tensor->mutable_data()) v += u(rng);
        }
    }
}

std::vector<ad::Tensor*> tensors_of(const ParamList& params) {
    std::vector<ad::Tensor*> out;
    for (const auto& p : params) out.push_back(p.tensor);
    return out;
}

struct Toy {
    FlowModel flow;
    DynamicsModel dynamics;
    Toy(std::size_t D, std::size_t d, std::size_t m, std::uint64_t seed,
        Conditioning c = Conditioning::MeanOnly)
        : flow(toy_flow(D, d, c), seed), dynamics(make_dynamics(d, m, seed)) {}

    static DynamicsModel make_dynamics(std::size_t d, std::size_t m, std::uint64_t seed) {
        std::mt19937_64 rng(seed + 77);
        return DynamicsModel(DynamicsNet(d, m, 8, rng), NoiseModel::defaults(d));
    }
    ParamList params() { return model_parameters(flow, dynamics); }
};

}  // namespace

TEST_CASE("decoupled objective with identity flow and zero mean") {
    Toy toy(6, 2, 1, 1);
    toy.flow.set_zero();
    auto traj = toy_trajectory(12, 6, 1, 1);
    const double nll = window_nll(nullptr, toy.flow, toy.dynamics, traj, 3, 4).item();
    double expected = 0.0;
    for (std::size_t t = 3; t <= 7; ++t) {
        for (std::size_t j = 0; j < 6; ++j) {
            const double y = traj.observations(t, j);
            expected += 0.5 * std::log(2 * std::numbers::pi) + 0.5 * y * y;
        }
    }
    CHECK(nll == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("single-step window is the negative loglik at the rollout state") {
    Toy toy(6, 2, 1, 2);
    std::mt19937_64 rng(2);
    perturb_biases(toy.params(), rng);
    auto traj = toy_trajectory(10, 6, 1, 2);
    for (std::size_t k : {0, 4, 9}) {
        const Vector x = rollout_state(toy.dynamics, traj, k + 1);
        const Vector y = traj.observation(k);
        const double direct = -toy.flow.observation_loglik({y.data(), 6}, {x.data(), 2});
        CHECK(window_nll(nullptr, toy.flow, toy.dynamics, traj, k, 0).item() == doctest::Approx(direct).epsilon(1e-13));
    }
}

TEST_CASE("rollout follows the mean recurrence") {
    Toy toy(4, 3, 2, 3);
    auto traj = toy_trajectory(6, 4, 2, 3);
    Vector x = toy.dynamics.noise().mu0;
    Vector u = Vector::Zero(2);
    for (std::size_t t = 0; t < 6; ++t) {
        CHECK((rollout_state(toy.dynamics, traj, t) - x).cwiseAbs().maxCoeff() < 1e-14);
        x = predict_mean(toy.dynamics.matrices_at(x), x, u);
        u = traj.control(t);
    }
}

TEST_CASE("window out of range is a usage error") {
    Toy toy(4, 2, 1, 4);
    auto traj = toy_trajectory(5, 4, 1, 4);
    CHECK_NOTHROW(window_nll(nullptr, toy.flow, toy.dynamics, traj, 1, 3));
    CHECK_THROWS_AS(window_nll(nullptr, toy.flow, toy.dynamics, traj, 2, 3), UsageError);
}

TEST_CASE("window gradients match finite differences") {
    // D = 8, d = 2, K = 3 toy across seeds, both conditioning modes. With
    // k = 0 there is no prefix, so the gradient is the full derivative.
    for (auto mode : {Conditioning::MeanOnly, Conditioning::CouplingLayers}) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            Toy toy(8, 2, 1, seed, mode);
            std::mt19937_64 rng(seed);
            perturb_biases(toy.params(), rng);
            auto traj = toy_trajectory(10, 8, 1, seed + 100);
            auto params = toy.params();
            auto f = [&](ad::Tape* tape) { return window_nll(tape, toy.flow, toy.dynamics, traj, 0, 3); };
            worst = std::max(worst, ad::gradient_check(f, tensors_of(params), 1e-6).max_relative_error);
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("later windows treat the prefix state as data") {
    // The oracle re-implements the window sum with the start state frozen at
    // the unperturbed prefix rollout.
    Toy toy(8, 2, 1, 3);
    std::mt19937_64 rng(3);
    perturb_biases(toy.params(), rng);
    auto traj = toy_trajectory(12, 8, 1, 33);
    const std::size_t k = 4, K = 3;
    const Vector start = rollout_state(toy.dynamics, traj, k);
    auto row = [](const RowMatrix& m, std::size_t t) {
        return Var::constant(std::vector<double>(m.row(static_cast<Eigen::Index>(t)).begin(),
                                                 m.row(static_cast<Eigen::Index>(t)).end()));
    };
    auto frozen = [&](ad::Tape* tape) {
        Var x = Var::constant({start.data(), start.data() + start.size()});
        Var u = row(traj.controls, k - 1);
        Var total = Var::scalar(0.0);
        for (std::size_t t = k; t <= k + K; ++t) {
            x = toy.dynamics.step_mean(tape, x, u);
            total = ad::sub(total, toy.flow.observation_loglik(tape, row(traj.observations, t), x));
            u = row(traj.controls, t);
        }
        return total;
    };
    auto params = toy.params();
    auto tensors = tensors_of(params);
    for (auto* t : tensors) {
        t->set_requires_grad(true);
        t->mutable_grad();
        t->zero_grad();
    }
    {
        ad::Tape tape;
        auto loss = window_nll(&tape, toy.flow, toy.dynamics, traj, k, K);
        CHECK(loss.item() == frozen(nullptr).item());
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto* t : tensors) analytic.emplace_back(t->grad().begin(), t->grad().end());
    // gradient_check recomputes the tape gradient of `frozen`, which must agree
    // with window_nll's and with central differences.
    // Some coordinates have gradients near 1e-6 against a loss near 50; a
    // larger step keeps cancellation error below the tolerance.
    auto r = ad::gradient_check(frozen, tensors, 1e-4);
    CHECK(r.max_relative_error < 1e-4);
    for (std::size_t p = 0; p < tensors.size(); ++p) {
        auto g = tensors[p]->grad();
        for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == analytic[p][i]);
    }
}

TEST_CASE("full loss gradient on a two-step trajectory") {
    Toy toy(4, 2, 1, 9);
    std::mt19937_64 rng(9);
    perturb_biases(toy.params(), rng);
    auto traj = toy_trajectory(2, 4, 1, 9);
    auto params = toy.params();
    auto f = [&](ad::Tape* tape) { return window_nll(tape, toy.flow, toy.dynamics, traj, 0, 1); };
    CHECK(ad::gradient_check(f, tensors_of(params), 1e-6).max_relative_error < 1e-4);
}

TEST_CASE("log-det term ignores the mean and dynamics parameters") {
    Toy toy(6, 2, 1, 5);
    std::mt19937_64 rng(5);
    perturb_biases(toy.params(), rng);
    auto traj = toy_trajectory(6, 6, 1, 5);
    auto params = toy.params();
    for (auto& p : params) {
        p.tensor->set_requires_grad(true);
        p.tensor->mutable_grad();
        p.tensor->zero_grad();
    }
    {
        ad::Tape tape;
        Var total = Var::scalar(0.0);
        for (std::size_t t = 0; t < 6; ++t) {
            const Vector y = traj.observation(t);
            total = ad::add(total, toy.flow.inverse(&tape, Var::constant({y.data(), y.data() + 6})).logdet);
        }
        tape.backward(total);
    }
    double flow_grad = 0.0;
    for (const auto& p : params) {
        double norm = 0.0;
        for (double g : p.tensor->grad()) norm += g * g;
        if (p.name.rfind("flow.layer", 0) == 0) {
            flow_grad += norm;
        } else {
            CHECK_MESSAGE(norm == 0.0, p.name);
        }
    }
    CHECK(flow_grad > 0.0);

    // The Gaussian term still depends on the coupling parameters through yhat.
    for (auto& p : params) p.tensor->zero_grad();
    {
        ad::Tape tape;
        const Vector y = traj.observation(0);
        auto inv = toy.flow.inverse(&tape, Var::constant({y.data(), y.data() + 6}));
        auto mu = toy.flow.mean(&tape, Var::constant({0.1, 0.2}));
        tape.backward(gaussian_logpdf(inv.base, mu, toy.flow.sigma()));
    }
    double coupling = 0.0;
    for (const auto& p : params) {
        if (p.name.rfind("flow.layer", 0) == 0) {
            for (double g : p.tensor->grad()) coupling += g * g;
        }
    }
    CHECK(coupling > 0.0);
}

TEST_CASE("windows partition each trajectory") {
    auto w = make_windows(3, 18, 4);
    REQUIRE(w.size() == 4);
    std::size_t covered = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        CHECK(w[i].trajectory == 3);
        CHECK(w[i].start == covered);
        covered += w[i].K + 1;
    }
    CHECK(covered == 18);
    CHECK(w.back().K == 2);
    CHECK(make_windows(0, 0, 8).empty());
    auto exact = make_windows(0, 18, 8);
    REQUIRE(exact.size() == 2);
    CHECK(exact[1].start == 9);
    CHECK(exact[1].K == 8);
}

TEST_CASE("optimizer examples") {
    TrainingConfig cfg;
    ad::Tensor p({3}, {1.0, -2.0, 0.5}, true);
    ParamList params{{"p", &p}};
    p.mutable_grad();
    AdamState state;

    optimizer_step(params, state, cfg);
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == -2.0);

    // First step from zero moments: m_hat = g, v_hat = g^2.
    std::vector<double> g{0.3, -4.0, 1e-3};
    AdamState fresh;
    ad::Tensor q({3}, {0.0, 0.0, 0.0}, true);
    ParamList qp{{"q", &q}};
    std::copy(g.begin(), g.end(), q.mutable_grad().begin());
    optimizer_step(qp, fresh, cfg);
    for (int i = 0; i < 3; ++i) {
        const double expected = -cfg.learning_rate * g[i] / (std::abs(g[i]) + cfg.epsilon);
        CHECK(q.data()[i] == doctest::Approx(expected).epsilon(1e-12));
    }

    // Constant gradient: steps approach lr * sign(g).
    AdamState steady;
    ad::Tensor r({1}, {0.0}, true);
    ParamList rp{{"r", &r}};
    double last_step = 0.0;
    for (int i = 0; i < 5000; ++i) {
        r.mutable_grad()[0] = 2.5;
        const double before = r.data()[0];
        optimizer_step(rp, steady, cfg);
        last_step = r.data()[0] - before;
    }
    CHECK(last_step == doctest::Approx(-cfg.learning_rate).epsilon(1e-6));

    r.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        optimizer_step(rp, steady, cfg);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("parameter r") != std::string::npos);
    }
}

TEST_CASE("gradient clipping") {
    ad::Tensor a({2}, {0, 0}, true);
    ParamList params{{"a", &a}};
    a.mutable_grad()[0] = 30;
    a.mutable_grad()[1] = 40;
    CHECK(clip_gradients(params, 10.0) == 50.0);
    CHECK(a.grad()[0] == doctest::Approx(6.0));
    CHECK(a.grad()[1] == doctest::Approx(8.0));
    CHECK(clip_gradients(params, 0.0) == doctest::Approx(10.0));
}

TEST_CASE("training config validation") {
    TrainingConfig cfg;
    cfg.beta1 = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainingConfig{};
    cfg.learning_rate = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("zero learning rate freezes training") {
    Toy toy(8, 2, 1, 6);
    std::vector<Trajectory> data{toy_trajectory(20, 8, 1, 1), toy_trajectory(15, 8, 1, 2)};
    auto before = snapshot(toy.params()).values;
    TrainingConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    cfg.window = 4;
    auto result = train(toy.flow, toy.dynamics, data, cfg);
    CHECK(snapshot(toy.params()).values == before);
    const std::size_t windows = result.history.size() / 3;
    std::map<std::size_t, double> first;
    for (const auto& r : result.history) {
        if (r.epoch == 0) first[r.window] = r.nll;
        else CHECK(r.nll == first.at(r.window));
    }
    CHECK(first.size() == windows);
    CHECK(result.epoch_means[0] == doctest::Approx(result.epoch_means[2]).epsilon(1e-13));
}

TEST_CASE("training is deterministic and decreases the loss") {
    auto run = [](const std::filesystem::path& ckpt) {
        Toy toy(8, 2, 1, 7);
        std::vector<Trajectory> data{toy_trajectory(30, 8, 1, 3), toy_trajectory(30, 8, 1, 4)};
        TrainingConfig cfg;
        cfg.epochs = 15;
        cfg.window = 4;
        cfg.learning_rate = 1e-2;
        cfg.seed = 5;
        cfg.dequantize = true;
        TrainOptions opts;
        opts.checkpoint = ckpt;
        std::size_t calls = 0;
        opts.on_epoch = [&](std::size_t, double) { ++calls; };
        auto r = train(toy.flow, toy.dynamics, data, cfg, opts);
        CHECK(calls == 15);
        return r;
    };
    auto dir = testutil::scratch_dir("train_det");
    auto a = run(dir / "a.ckpt");
    auto b = run(dir / "b.ckpt");
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].window == b.history[i].window);
        CHECK(a.history[i].nll == b.history[i].nll);
    }
    CHECK(testutil::slurp(dir / "a.ckpt") == testutil::slurp(dir / "b.ckpt"));
    CHECK(a.epoch_means.back() < a.epoch_means.front());

    write_loss_csv(dir / "loss.csv", a.history);
    auto text = testutil::slurp(dir / "loss.csv");
    CHECK(text.rfind("epoch,window,nll\n", 0) == 0);
}

TEST_CASE("checkpoint round trip reproduces the window loss") {
    auto dir = testutil::scratch_dir("train_ckpt");
    Toy a(8, 2, 1, 8);
    std::mt19937_64 rng(8);
    perturb_biases(a.params(), rng);
    save_checkpoint(dir / "m.ckpt", a.params());
    Toy b(8, 2, 1, 99);
    load_checkpoint(dir / "m.ckpt", b.params());
    auto traj = toy_trajectory(12, 8, 1, 8);
    CHECK(window_nll(nullptr, a.flow, a.dynamics, traj, 2, 5).item() ==
          window_nll(nullptr, b.flow, b.dynamics, traj, 2, 5).item());
}

TEST_CASE("mismatched datasets are rejected") {
    Toy toy(8, 2, 1, 1);
    std::vector<Trajectory> data{toy_trajectory(10, 8, 1, 1), toy_trajectory(10, 6, 1, 2)};
    CHECK_THROWS_AS(train(toy.flow, toy.dynamics, data, TrainingConfig{}), DataError);
}

TEST_CASE("dequantization noise is fixed per seed and bounded") {
    std::vector<Trajectory> data{toy_trajectory(10, 4, 1, 1), toy_trajectory(10, 4, 1, 2)};
    auto a = dequantized(data, 3);
    auto b = dequantized(data, 3);
    auto c = dequantized(data, 4);
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(a[i].observations == b[i].observations);
        CHECK(a[i].observations != c[i].observations);
        RowMatrix diff = a[i].observations - data[i].observations;
        CHECK(diff.minCoeff() >= 0.0);
        CHECK(diff.maxCoeff() < 1.0 / 256.0);
    }
}
