#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "nfpf/errors.hpp"
#include "nfpf/experiment.hpp"
#include "nfpf/filters.hpp"
#include "nfpf/flow.hpp"
#include "nfpf/sim.hpp"

namespace py = pybind11;
using namespace nfpf;
using ad::Var;

namespace {

Conditioning parse_conditioning(const std::string& name) {
    if (name == "mean") return Conditioning::MeanOnly;
    if (name == "coupling") return Conditioning::CouplingLayers;
    throw ConfigError("conditioning must be 'mean' or 'coupling', got '" + name + "'");
}

std::optional<Var> optional_var(const std::optional<std::vector<double>>& x) {
    if (!x) return std::nullopt;
    return Var::constant(*x);
}

ParticleSet weighted_set(const Vector& weights) {
    ParticleSet ps;
    ps.states = Matrix::Zero(weights.size(), 1);
    ps.weights = weights;
    return ps;
}

DynamicsModel benchmark_dynamics(const LinGaussSystem& sys) {
    return DynamicsModel(DynamicsMatrices{sys.A, sys.B}, NoiseModel{sys.Q, sys.mu0, sys.sigma0});
}

py::dict trace_dict(const FilterTrace& trace) {
    RowMatrix means(static_cast<Eigen::Index>(trace.steps.size()), static_cast<Eigen::Index>(trace.state_dim));
    Vector ess_values(static_cast<Eigen::Index>(trace.steps.size()));
    std::vector<bool> resampled;
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        means.row(static_cast<Eigen::Index>(t)) = trace.steps[t].mean.transpose();
        ess_values[static_cast<Eigen::Index>(t)] = trace.steps[t].ess;
        resampled.push_back(trace.steps[t].resampled);
    }
    py::dict out;
    out["means"] = means;
    out["ess"] = ess_values;
    out["resampled"] = resampled;
    return out;
}

}  // namespace

PYBIND11_MODULE(_nfpf, m) {
    m.doc() = "Particle filtering with a conditional normalizing-flow observation model";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<UsageError>(m, "UsageError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

    // Trajectories

    py::class_<Trajectory>(m, "Trajectory")
        .def_readonly("observations", &Trajectory::observations)
        .def_readonly("controls", &Trajectory::controls)
        .def_readonly("true_states", &Trajectory::true_states)
        .def_readonly("dt", &Trajectory::dt)
        .def_readonly("seed", &Trajectory::seed)
        .def_readonly("image_side", &Trajectory::image_side)
        .def("__len__", &Trajectory::length);

    m.def("read_trajectory", &read_trajectory, py::arg("path"));
    m.def("write_trajectory", &write_trajectory, py::arg("path"), py::arg("trajectory"));

    m.def("lingauss_benchmark", [] {
        const auto s = lingauss_benchmark();
        py::dict out;
        out["A"] = s.A;
        out["B"] = s.B;
        out["Q"] = s.Q;
        out["H"] = s.H;
        out["R"] = s.R;
        out["mu0"] = s.mu0;
        out["sigma0"] = s.sigma0;
        return out;
    });

    m.def(
        "generate_lingauss",
        [](std::size_t T, std::uint64_t seed, const std::string& controller) {
            return lingauss_generate(lingauss_benchmark(), T, parse_controller(controller), seed);
        },
        py::arg("horizon"), py::arg("seed") = 0, py::arg("controller") = "random");

    m.def(
        "generate_pendulum",
        [](std::size_t T, std::uint64_t seed, const std::string& controller, std::size_t image_side, double dt) {
            PendulumParams p;
            p.image_side = image_side;
            p.dt = dt;
            p.validate();
            return pendulum_generate(p, T, parse_controller(controller), seed);
        },
        py::arg("horizon"), py::arg("seed") = 0, py::arg("controller") = "random", py::arg("image_side") = 16,
        py::arg("dt") = 0.05);

    // Filters on the linear-Gaussian benchmark

    m.def(
        "kalman_filter",
        [](const Trajectory& traj) {
            const auto kf = kalman_filter(lingauss_benchmark(), traj);
            RowMatrix means(static_cast<Eigen::Index>(kf.filtered.size()), 2);
            std::vector<Matrix> covs;
            for (std::size_t t = 0; t < kf.filtered.size(); ++t) {
                means.row(static_cast<Eigen::Index>(t)) = kf.filtered[t].mean.transpose();
                covs.push_back(kf.filtered[t].cov);
            }
            py::dict out;
            out["means"] = means;
            out["covs"] = covs;
            return out;
        },
        py::arg("trajectory"), "Kalman filter for the linear-Gaussian benchmark.");

    m.def(
        "particle_filter",
        [](const Trajectory& traj, std::size_t particles, std::uint64_t seed, double threshold) {
            const auto sys = lingauss_benchmark();
            FilterConfig cfg;
            cfg.particles = particles;
            cfg.seed = seed;
            cfg.resample_threshold = threshold;
            cfg.keep_weights = false;
            FilterTrace trace;
            {
                py::gil_scoped_release release;
                trace = run_filter(traj, linear_gaussian_loglik(sys.H, sys.R), benchmark_dynamics(sys), cfg);
            }
            return trace_dict(trace);
        },
        py::arg("trajectory"), py::arg("particles") = 100, py::arg("seed") = 0, py::arg("resample_threshold") = 0.5,
        "Bootstrap particle filter for the linear-Gaussian benchmark.");

    // Particle filter algebra

    m.def(
        "weight_update",
        [](const Vector& weights, const std::vector<double>& logliks) {
            return pf_weight_update(weighted_set(weights), logliks, 0).weights;
        },
        py::arg("weights"), py::arg("logliks"));
    m.def("ess", [](const Vector& weights) { return ess(weighted_set(weights)); }, py::arg("weights"));
    m.def(
        "systematic_counts",
        [](const std::vector<double>& weights, double offset) { return systematic_counts(weights, offset); },
        py::arg("weights"), py::arg("offset"));

    // Models

    py::class_<FlowModel>(m, "FlowModel")
        .def(py::init([](std::size_t obs_dim, std::size_t state_dim, std::size_t layers, std::size_t hidden,
                         std::size_t mean_hidden, double sigma, const std::string& conditioning, std::uint64_t seed) {
                 FlowConfig cfg;
                 cfg.obs_dim = obs_dim;
                 cfg.state_dim = state_dim;
                 cfg.layers = layers;
                 cfg.coupling_hidden = hidden;
                 cfg.mean_hidden = mean_hidden;
                 cfg.sigma = sigma;
                 cfg.conditioning = parse_conditioning(conditioning);
                 return FlowModel(cfg, seed);
             }),
             py::arg("obs_dim"), py::arg("state_dim"), py::arg("layers") = 4, py::arg("hidden") = 64,
             py::arg("mean_hidden") = 64, py::arg("sigma") = 1.0, py::arg("conditioning") = "mean",
             py::arg("seed") = 0)
        .def_property_readonly("obs_dim", &FlowModel::obs_dim)
        .def_property_readonly("state_dim", &FlowModel::state_dim)
        .def(
            "observation_loglik",
            [](const FlowModel& f, const std::vector<double>& y, const std::vector<double>& x) {
                return f.observation_loglik(y, x);
            },
            py::arg("y"), py::arg("x"))
        .def(
            "inverse",
            [](const FlowModel& f, const std::vector<double>& y, const std::optional<std::vector<double>>& x) {
                auto r = f.inverse(nullptr, Var::constant(y), optional_var(x));
                return py::make_tuple(r.base.to_vector(), r.logdet.item());
            },
            py::arg("y"), py::arg("x") = py::none(), "Returns (base point, log|det J|) of the inverse map.")
        .def(
            "forward",
            [](const FlowModel& f, const std::vector<double>& base, const std::optional<std::vector<double>>& x) {
                return f.forward(nullptr, Var::constant(base), optional_var(x)).to_vector();
            },
            py::arg("base"), py::arg("x") = py::none())
        .def(
            "sample",
            [](const FlowModel& f, const std::vector<double>& x, std::uint64_t seed) {
                std::mt19937_64 rng(seed);
                return f.sample_observation(x, rng);
            },
            py::arg("x"), py::arg("seed") = 0)
        .def("parameter_names", [](FlowModel& f) {
            std::vector<std::string> names;
            for (const auto& p : f.parameters()) names.push_back(p.name);
            return names;
        });

    py::class_<DynamicsNet>(m, "DynamicsNet")
        .def(py::init([](std::size_t state_dim, std::size_t control_dim, std::size_t hidden, std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 return DynamicsNet(state_dim, control_dim, hidden, rng);
             }),
             py::arg("state_dim"), py::arg("control_dim"), py::arg("hidden") = 32, py::arg("seed") = 0)
        .def(
            "evaluate",
            [](const DynamicsNet& net, const Vector& x) {
                auto mats = net.evaluate(x);
                return py::make_tuple(mats.A, mats.B);
            },
            py::arg("x"), "Normalized (A, B) at state x.");

    m.def("spectral_radius", &spectral_radius, py::arg("A"));
    m.def("frobenius_normalize", [](const Matrix& a) { return frobenius_normalize(a); }, py::arg("m"));
    m.def(
        "controllability_rank", [](const Matrix& a, const Matrix& b) { return controllability_rank(a, b); },
        py::arg("A"), py::arg("B"));

    // Experiment commands, driven by a config file

    m.def(
        "generate", [](const std::filesystem::path& cfg) { return cmd_generate(load_config(cfg)).files; },
        py::arg("config"));
    m.def(
        "train",
        [](const std::filesystem::path& cfg) {
            const auto c = load_config(cfg);
            py::gil_scoped_release release;
            return cmd_train(c).epoch_means;
        },
        py::arg("config"), "Returns the epoch-mean NLL curve.");
    m.def(
        "filter",
        [](const std::filesystem::path& cfg) {
            const auto c = load_config(cfg);
            FilterTrace trace;
            {
                py::gil_scoped_release release;
                trace = cmd_filter(c);
            }
            return trace_dict(trace);
        },
        py::arg("config"));
    m.def(
        "evaluate",
        [](const std::filesystem::path& cfg) {
            const auto e = cmd_eval(load_config(cfg));
            py::dict out;
            out["rmse"] = e.rmse;
            out["mean_ess"] = e.mean_ess;
            out["resample_count"] = e.resample_count;
            out["overall_rmse"] = e.overall_rmse;
            return out;
        },
        py::arg("config"));
}
