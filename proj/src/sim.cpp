#include "nfpf/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "nfpf/errors.hpp"

namespace nfpf {

void Trajectory::validate() const {
    const auto T = observations.rows();
    if (controls.rows() != T || (true_states.cols() > 0 && true_states.rows() != T)) {
        throw DataError("trajectory sequences have different lengths");
    }
    if (!observations.allFinite() || !controls.allFinite() || !true_states.allFinite()) {
        throw DataError("trajectory contains non-finite values");
    }
}

Controller parse_controller(std::string_view name) {
    if (name == "zero") return Controller::Zero;
    if (name == "random") return Controller::RandomUniform;
    if (name == "sine") return Controller::Sine;
    throw ConfigError("unknown controller '" + std::string(name) + "' (expected zero, random or sine)");
}

std::string_view controller_name(Controller c) {
    switch (c) {
        case Controller::Zero: return "zero";
        case Controller::RandomUniform: return "random";
        case Controller::Sine: return "sine";
    }
    return "zero";
}

double controller_value(Controller c, std::size_t t, double dt, double rng_draw) {
    switch (c) {
        case Controller::Zero: return 0.0;
        case Controller::RandomUniform: return 2.0 * rng_draw - 1.0;
        case Controller::Sine: return std::sin(2.0 * std::numbers::pi * 0.2 * static_cast<double>(t) * dt);
    }
    return 0.0;
}

// ---------------------------------------------------------------------------

void LinGaussSystem::validate() const {
    const auto d = A.rows();
    if (A.cols() != d || B.rows() != d || Q.rows() != d || H.cols() != d || R.rows() != H.rows() ||
        mu0.size() != d || sigma0.rows() != d || (initial_state && initial_state->size() != d)) {
        throw DimensionError("linear-Gaussian system matrices do not conform");
    }
    require_psd(Q, "process noise Q");
    require_psd(R, "observation noise R");
    require_psd(sigma0, "initial covariance sigma0");
}

LinGaussSystem lingauss_benchmark() {
    const double c = std::cos(0.3);
    const double s = std::sin(0.3);
    LinGaussSystem sys;
    sys.A = Matrix(2, 2);
    sys.A << 0.9 * c, -0.9 * s, 0.9 * s, 0.9 * c;
    sys.B = Matrix(2, 1);
    sys.B << 0.0, 0.1;
    sys.Q = 0.01 * Matrix::Identity(2, 2);
    sys.H = Matrix::Identity(2, 2);
    sys.R = 0.1 * Matrix::Identity(2, 2);
    sys.mu0 = Vector::Zero(2);
    sys.sigma0 = Matrix::Identity(2, 2);
    return sys;
}

Trajectory lingauss_generate(const LinGaussSystem& sys, std::size_t T, Controller controller, std::uint64_t seed,
                             double dt) {
    sys.validate();
    const auto d = static_cast<Eigen::Index>(sys.state_dim());
    const auto m = static_cast<Eigen::Index>(sys.control_dim());
    const auto D = static_cast<Eigen::Index>(sys.obs_dim());
    const Matrix LQ = psd_cholesky(sys.Q);
    const Matrix LR = psd_cholesky(sys.R);
    const Matrix L0 = psd_cholesky(sys.sigma0);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    auto gaussian = [&](Eigen::Index n) {
        Vector z(n);
        for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
        return z;
    };

    Trajectory traj;
    traj.observations.resize(static_cast<Eigen::Index>(T), D);
    traj.controls.resize(static_cast<Eigen::Index>(T), m);
    traj.true_states.resize(static_cast<Eigen::Index>(T), d);
    traj.dt = dt;
    traj.seed = seed;

    Vector x = sys.initial_state ? *sys.initial_state : Vector(sys.mu0 + L0 * gaussian(d));
    Vector u = Vector::Zero(m);
    for (std::size_t t = 0; t < T; ++t) {
        const auto row = static_cast<Eigen::Index>(t);
        x = sys.A * x + sys.B * u + LQ * gaussian(d);
        Vector y = sys.H * x + LR * gaussian(D);
        for (Eigen::Index j = 0; j < m; ++j) u[j] = controller_value(controller, t, dt, uniform(rng));
        traj.true_states.row(row) = x.transpose();
        traj.observations.row(row) = y.transpose();
        traj.controls.row(row) = u.transpose();
    }
    return traj;
}

// ---------------------------------------------------------------------------

void PendulumParams::validate() const {
    if (!(mass > 0 && length > 0 && gravity > 0 && damping >= 0 && dt > 0 && torque_scale > 0)) {
        throw ConfigError("pendulum parameters must be positive");
    }
    if (image_side < 8) throw ConfigError("pendulum image side must be at least 8");
}

double wrap_angle(double angle) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double a = std::fmod(angle + std::numbers::pi, two_pi);
    if (a < 0) a += two_pi;
    a -= std::numbers::pi;
    // fmod maps pi to -pi; keep the half-open interval (-pi, pi].
    if (a <= -std::numbers::pi) a += two_pi;
    return a;
}

PendulumState pendulum_step(const PendulumState& s, double u, const PendulumParams& p) {
    const double inertia = p.mass * p.length * p.length;
    const double accel = -p.gravity / p.length * std::sin(s.angle) - p.damping * s.angular_velocity +
                         p.torque_scale * u / inertia;
    PendulumState next;
    next.angular_velocity = s.angular_velocity + p.dt * accel;
    next.angle = wrap_angle(s.angle + p.dt * next.angular_velocity);
    return next;
}

std::vector<double> pendulum_render(const PendulumState& s, const PendulumParams& p) {
    if (p.image_side < 8) throw ConfigError("pendulum image side must be at least 8");
    const std::size_t S = p.image_side;
    const double side = static_cast<double>(S);
    const double centre = side / 2.0;
    const double rod = 0.4 * side;
    const double half_width = 0.75;
    // Image x grows to the right, y grows downwards; angle 0 hangs straight down.
    const double ex = std::sin(s.angle) * rod;
    const double ey = std::cos(s.angle) * rod;
    const double len2 = rod * rod;

    std::vector<double> image(S * S, 0.0);
    for (std::size_t r = 0; r < S; ++r) {
        for (std::size_t c = 0; c < S; ++c) {
            const double px = static_cast<double>(c) + 0.5 - centre;
            const double py = static_cast<double>(r) + 0.5 - centre;
            const double along = std::clamp((px * ex + py * ey) / len2, 0.0, 1.0);
            const double dx = px - along * ex;
            const double dy = py - along * ey;
            const double dist = std::sqrt(dx * dx + dy * dy);
            // One-pixel linear ramp across the rod edge.
            image[r * S + c] = std::clamp(half_width + 0.5 - dist, 0.0, 1.0);
        }
    }
    return image;
}

Trajectory pendulum_generate(const PendulumParams& p, std::size_t T, Controller controller, std::uint64_t seed,
                             std::optional<PendulumState> initial) {
    p.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    PendulumState state;
    if (initial) {
        state = *initial;
    } else {
        state.angle = (uniform(rng) - 0.5) * std::numbers::pi;
        state.angular_velocity = 2.0 * uniform(rng) - 1.0;
    }

    const auto D = static_cast<Eigen::Index>(p.image_side * p.image_side);
    Trajectory traj;
    traj.observations.resize(static_cast<Eigen::Index>(T), D);
    traj.controls.resize(static_cast<Eigen::Index>(T), 1);
    traj.true_states.resize(static_cast<Eigen::Index>(T), 2);
    traj.dt = p.dt;
    traj.seed = seed;
    traj.image_side = p.image_side;

    for (std::size_t t = 0; t < T; ++t) {
        const auto row = static_cast<Eigen::Index>(t);
        auto image = pendulum_render(state, p);
        traj.observations.row(row) = Eigen::Map<const Eigen::RowVectorXd>(image.data(), D);
        const double u = controller_value(controller, t, p.dt, uniform(rng));
        traj.controls(row, 0) = u;
        traj.true_states(row, 0) = state.angle;
        traj.true_states(row, 1) = state.angular_velocity;
        state = pendulum_step(state, u, p);
    }
    return traj;
}

// ---------------------------------------------------------------------------

namespace {

void append_number(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += buf;
}

double parse_number(const std::string& token, const std::filesystem::path& path, std::size_t line) {
    char* end = nullptr;
    const double v = std::strtod(token.c_str(), &end);
    if (end == token.c_str() || *end != '\0') {
        throw DataError(path.string() + ":" + std::to_string(line) + ": bad number '" + token + "'");
    }
    return v;
}

}  // namespace

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
    traj.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write trajectory " + path.string());
    std::string text = "nfpf-traj v1 " + std::to_string(traj.length()) + ' ' + std::to_string(traj.obs_dim()) +
                       ' ' + std::to_string(traj.control_dim()) + ' ' + std::to_string(traj.env_state_dim()) +
                       ' ' + std::to_string(traj.image_side) + ' ';
    append_number(text, traj.dt);
    text += ' ' + std::to_string(traj.seed) + '\n';
    for (std::size_t t = 0; t < traj.length(); ++t) {
        const auto row = static_cast<Eigen::Index>(t);
        text += std::to_string(t);
        for (Eigen::Index j = 0; j < traj.observations.cols(); ++j) {
            text += ',';
            append_number(text, traj.observations(row, j));
        }
        for (Eigen::Index j = 0; j < traj.controls.cols(); ++j) {
            text += ',';
            append_number(text, traj.controls(row, j));
        }
        for (Eigen::Index j = 0; j < traj.true_states.cols(); ++j) {
            text += ',';
            append_number(text, traj.true_states(row, j));
        }
        text += '\n';
    }
    out << text;
    if (!out) throw IoError("failed writing trajectory " + path.string());
}

Trajectory read_trajectory(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open trajectory " + path.string());
    std::string header;
    if (!std::getline(in, header)) throw DataError("empty trajectory file " + path.string());

    std::istringstream hs(header);
    std::string magic;
    std::string version;
    std::size_t T = 0;
    std::size_t D = 0;
    std::size_t m = 0;
    std::size_t d_env = 0;
    std::size_t S = 0;
    std::string dt_token;
    std::uint64_t seed = 0;
    if (!(hs >> magic >> version >> T >> D >> m >> d_env >> S >> dt_token >> seed) || magic != "nfpf-traj" ||
        version != "v1") {
        throw DataError("bad trajectory header in " + path.string());
    }

    Trajectory traj;
    traj.dt = parse_number(dt_token, path, 1);
    traj.seed = seed;
    traj.image_side = S;
    traj.observations.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(D));
    traj.controls.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(m));
    traj.true_states.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d_env));

    std::string line;
    std::vector<std::string> fields;
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t lineno = t + 2;
        if (!std::getline(in, line)) {
            throw DataError(path.string() + ": expected " + std::to_string(T) + " rows, found " + std::to_string(t));
        }
        fields.clear();
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 1 + D + m + d_env) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(1 + D + m + d_env) + " columns, found " + std::to_string(fields.size()));
        }
        if (parse_number(fields[0], path, lineno) != static_cast<double>(t)) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": rows out of order");
        }
        const auto row = static_cast<Eigen::Index>(t);
        std::size_t k = 1;
        for (std::size_t j = 0; j < D; ++j) traj.observations(row, static_cast<Eigen::Index>(j)) = parse_number(fields[k++], path, lineno);
        for (std::size_t j = 0; j < m; ++j) traj.controls(row, static_cast<Eigen::Index>(j)) = parse_number(fields[k++], path, lineno);
        for (std::size_t j = 0; j < d_env; ++j) traj.true_states(row, static_cast<Eigen::Index>(j)) = parse_number(fields[k++], path, lineno);
    }
    traj.validate();
    return traj;
}

}  // namespace nfpf
