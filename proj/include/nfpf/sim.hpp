#pragma once

// Synthetic environments: a linear-Gaussian benchmark with known ground truth
// and a damped pendulum rendered to small grayscale images.
//
// Time convention shared by every generator, the trainer and the filters:
// row t holds the observation y_t of state x_t and the control u_t applied
// after observing it, so x_{t+1} = f(x_t, u_t). The step before the first
// row starts from the prior with a zero control.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "nfpf/dynamics.hpp"

namespace nfpf {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Trajectory {
    RowMatrix observations;  // T x D
    RowMatrix controls;      // T x m
    RowMatrix true_states;   // T x d_env, zero columns when absent
    double dt = 0.0;
    std::uint64_t seed = 0;
    /// Image side for rendered observations, 0 for vector observations.
    std::size_t image_side = 0;

    std::size_t length() const { return static_cast<std::size_t>(observations.rows()); }
    std::size_t obs_dim() const { return static_cast<std::size_t>(observations.cols()); }
    std::size_t control_dim() const { return static_cast<std::size_t>(controls.cols()); }
    std::size_t env_state_dim() const { return static_cast<std::size_t>(true_states.cols()); }
    bool has_truth() const { return true_states.cols() > 0; }

    Vector observation(std::size_t t) const { return observations.row(static_cast<Eigen::Index>(t)).transpose(); }
    Vector control(std::size_t t) const { return controls.row(static_cast<Eigen::Index>(t)).transpose(); }

    /// Throws DataError when row counts disagree or values are non-finite.
    void validate() const;
};

enum class Controller { Zero, RandomUniform, Sine };

Controller parse_controller(std::string_view name);
std::string_view controller_name(Controller c);

/// Control at step t; `rng_draw` is a uniform draw in [0, 1) used by the
/// random controller.
double controller_value(Controller c, std::size_t t, double dt, double rng_draw);

// ---------------------------------------------------------------------------
// Linear-Gaussian benchmark

struct LinGaussSystem {
    Matrix A;
    Matrix B;
    Matrix Q;
    Matrix H;
    Matrix R;
    Vector mu0;
    Matrix sigma0;
    /// When set, replaces the draw from N(mu0, sigma0) for the pre-initial state.
    std::optional<Vector> initial_state;

    std::size_t state_dim() const { return static_cast<std::size_t>(A.rows()); }
    std::size_t control_dim() const { return static_cast<std::size_t>(B.cols()); }
    std::size_t obs_dim() const { return static_cast<std::size_t>(H.rows()); }
    void validate() const;
};

/// A = 0.9 * rot(0.3), B = 0.1 [0 1]^T, Q = 0.01 I, H = I, R = 0.1 I,
/// mu0 = 0, sigma0 = I.
LinGaussSystem lingauss_benchmark();

Trajectory lingauss_generate(const LinGaussSystem& sys, std::size_t T, Controller controller, std::uint64_t seed,
                             double dt = 1.0);

// ---------------------------------------------------------------------------
// Pendulum

struct PendulumParams {
    double mass = 1.0;        // kg
    double length = 1.0;      // m
    double gravity = 9.81;    // m/s^2
    double damping = 0.1;     // 1/s
    double dt = 0.05;         // s
    std::size_t image_side = 16;
    double torque_scale = 2.0;  // N m per unit control

    void validate() const;
};

struct PendulumState {
    double angle = 0.0;             // rad, 0 = hanging down
    double angular_velocity = 0.0;  // rad/s
};

double wrap_angle(double angle);

PendulumState pendulum_step(const PendulumState& s, double u, const PendulumParams& p);

/// S*S grayscale image, row-major, rod drawn from the centre towards the bob.
std::vector<double> pendulum_render(const PendulumState& s, const PendulumParams& p);

Trajectory pendulum_generate(const PendulumParams& p, std::size_t T, Controller controller, std::uint64_t seed,
                             std::optional<PendulumState> initial = std::nullopt);

// ---------------------------------------------------------------------------
// File format

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory read_trajectory(const std::filesystem::path& path);

}  // namespace nfpf
