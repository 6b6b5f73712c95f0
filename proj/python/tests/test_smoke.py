import math

import numpy as np
import pytest

import nfpf


def test_benchmark_filters_agree():
    traj = nfpf.generate_lingauss(50, seed=1)
    assert len(traj) == 50
    assert traj.observations.shape == (50, 2)
    kf = nfpf.kalman_filter(traj)
    pf = nfpf.particle_filter(traj, particles=5000, seed=2)
    assert pf["means"].shape == (50, 2)
    rmse = np.sqrt(np.mean((pf["means"] - kf["means"]) ** 2))
    assert rmse < 0.1
    again = nfpf.particle_filter(traj, particles=5000, seed=2)
    assert np.array_equal(pf["means"], again["means"])


def test_pendulum_frames():
    traj = nfpf.generate_pendulum(10, seed=0, image_side=16)
    assert traj.observations.shape == (10, 256)
    assert traj.true_states.shape == (10, 2)
    assert traj.observations.min() >= 0.0 and traj.observations.max() <= 1.0


def test_flow_round_trip_and_density():
    flow = nfpf.FlowModel(6, 2, layers=4, hidden=16, mean_hidden=16, seed=3)
    rng = np.random.default_rng(0)
    y = rng.uniform(-1, 1, 6)
    x = rng.uniform(-1, 1, 2)
    base, logdet = flow.inverse(y, x)
    assert np.allclose(flow.forward(base, x), y, atol=1e-12)
    mu_term = flow.observation_loglik(y, x) - logdet
    assert math.isfinite(mu_term)
    assert len(flow.sample(x, seed=1)) == 6


def test_dynamics_constraints():
    net = nfpf.DynamicsNet(4, 2, hidden=16, seed=5)
    for s in range(20):
        A, B = net.evaluate(np.random.default_rng(s).normal(size=4))
        assert abs(np.linalg.norm(A) - 1.0) < 1e-10
        assert nfpf.spectral_radius(A) <= 1.0 + 1e-10
        assert B.shape == (4, 2)


def test_particle_algebra():
    w = nfpf.weight_update(np.full(4, 0.25), [0.0, 0.0, 0.0, 0.0])
    assert np.allclose(w, 0.25)
    assert nfpf.ess(np.full(10, 0.1)) == pytest.approx(10.0)
    assert nfpf.ess(np.array([1.0, 0.0, 0.0])) == 1.0
    assert sum(nfpf.systematic_counts([0.5, 0.25, 0.25], 0.3)) == 3


def test_config_errors_map_to_exceptions(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("partcles = 3\n")
    with pytest.raises(nfpf.ConfigError, match="partcles"):
        nfpf.generate(str(cfg))


def test_pipeline(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "env = pendulum\nimage_side = 8\nlatent_dim = 2\nflow_layers = 2\nflow_hidden = 8\n"
        "mean_hidden = 8\ndyn_hidden = 8\ntrajectories = 2\nhorizon = 20\nepochs = 2\n"
        "particles = 8\n"
    )
    files = nfpf.generate(str(cfg))
    assert len(files) == 2
    curve = nfpf.train(str(cfg))
    assert len(curve) == 2
    trace = nfpf.filter(str(cfg))
    assert trace["means"].shape == (20, 2)
    metrics = nfpf.evaluate(str(cfg))
    assert len(metrics["rmse"]) == 2
