"""World model: dynamics, reference paths, sensors, quality chain."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sccsim import plant
from sccsim.rng import RngHub


def test_default_model_matrices():
    model = plant.build_default_model(0.1)
    assert_allclose(model.a[0, :4], [1.0, 0.0, 0.1, 0.0])
    assert_allclose(model.b[:4, 0], [0.005, 0.0, 0.1, 0.0])
    model1 = plant.build_default_model(1.0)
    assert_allclose(model1.b[:4, 0], [0.5, 0.0, 1.0, 0.0])
    # block diagonality
    assert_allclose(model.a[:4, 4:], np.zeros((4, 4)))
    assert_allclose(model.b[:4, 2:], np.zeros((4, 2)))
    assert_allclose(model.q, model.q.T)


def test_step_dynamics_deterministic_cases():
    model = plant.build_default_model(0.1)
    x = np.zeros(8)
    x[2] = 1.0  # ctl velocity x
    nxt = plant.step_dynamics(model, x, np.zeros(4), rng=None)
    assert_allclose(nxt[:4], [0.1, 0.0, 1.0, 0.0])

    nxt = plant.step_dynamics(model, np.zeros(8), np.array([1.0, 0, 0, 0]), rng=None)
    assert_allclose(nxt[:4], [0.005, 0.0, 0.1, 0.0])


def test_step_dynamics_matches_matrix_oracle_with_noise():
    model = plant.build_default_model(0.1)
    hub_a, hub_b = RngHub(9), RngHub(9)
    rng = hub_a.stream("process-noise")
    oracle_rng = hub_b.stream("process-noise")
    x = np.arange(8.0)
    u = np.array([0.3, -0.2, 0.1, 0.4])
    got = plant.step_dynamics(model, x, u, rng)
    v = np.linalg.cholesky(model.q) @ oracle_rng.standard_normal(8)
    want = model.a @ x + model.b @ u + v
    assert_allclose(got, want, rtol=1e-12)


def test_step_dynamics_rejects_bad_shapes():
    model = plant.build_default_model(0.1)
    with pytest.raises(ValueError, match="state shape"):
        plant.step_dynamics(model, np.zeros(7), np.zeros(4), None)
    with pytest.raises(ValueError, match="input shape"):
        plant.step_dynamics(model, np.zeros(8), np.zeros(3), None)


def test_desired_trajectory_is_straight_line():
    model = plant.build_default_model(0.1)
    xd = np.zeros(8)
    xd[2] = 1.0  # ctl moves along x
    xd[7] = 1.0  # unctl moves along y
    path = [xd[:2].copy()]
    unctl_path = [xd[4:6].copy()]
    for _ in range(10):
        xd = plant.step_desired(model, xd)
        path.append(xd[:2].copy())
        unctl_path.append(xd[4:6].copy())
    for t, (p, q) in enumerate(zip(path, unctl_path)):
        assert_allclose(p, [0.1 * t, 0.0], atol=1e-12)
        assert_allclose(q, [0.0, 0.1 * t], atol=1e-12)

    fixed = plant.step_desired(model, np.array([3.0, 4.0, 0, 0, 1.0, 2.0, 0, 0]))
    assert_allclose(fixed, [3.0, 4.0, 0, 0, 1.0, 2.0, 0, 0], atol=1e-12)


def test_block_diagonality_decouples_unctl_perturbations():
    model = plant.build_default_model(0.1)
    x = np.arange(8.0)
    x_pert = x.copy()
    x_pert[4:] += 13.0
    a_x = plant.step_dynamics(model, x, np.zeros(4), None)
    a_xp = plant.step_dynamics(model, x_pert, np.zeros(4), None)
    assert_allclose(a_x[:4], a_xp[:4])


def test_ideal_unctl_input():
    model = plant.build_default_model(0.1)
    x = np.array([1.0, 2.0, 0.3, -0.1])
    assert_allclose(plant.ideal_unctl_input(model, x, x), np.zeros(2), atol=1e-14)
    gain = plant.default_gain(model)
    dev = np.array([0.5, -0.2, 0.1, 0.0])
    assert_allclose(plant.ideal_unctl_input(model, x + dev, x), -gain.k @ dev, rtol=1e-12)


def test_ideal_unctl_keeps_deviation_bounded_with_noise():
    model = plant.build_default_model(0.1)
    rng = RngHub(5).stream("process-noise")
    x = np.zeros(8)
    x[7] = 1.0
    xd = x.copy()
    devs = []
    for _ in range(500):
        u_un = plant.ideal_unctl_input(model, x[4:], xd[4:])
        u = np.concatenate([np.zeros(2), u_un])
        x = plant.step_dynamics(model, x, u, rng)
        xd = plant.step_desired(model, xd)
        devs.append(float(np.mean((x[4:] - xd[4:]) ** 2)))
    assert np.mean(devs[100:]) < 100.0
    assert np.isfinite(devs).all()


def _sensor(rng=None, **kw):
    model = plant.build_default_model(0.1)
    rng = rng or np.random.default_rng(0)
    return model, plant.make_sensor(rng, model, n_y=4, **kw)


def test_markov_absorbing_good():
    model, sensor = _sensor(p_stay_good=1.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert plant.markov_step(sensor, rng) == plant.GOOD


def test_markov_stationary_occupancy():
    model, sensor = _sensor(p_stay_good=0.9, p_stay_bad=0.9)
    rng = np.random.default_rng(7)
    good = 0
    n = 100_000
    for _ in range(n):
        if plant.markov_step(sensor, rng) == plant.GOOD:
            good += 1
    assert abs(good / n - 0.5) < 0.02


def test_bad_state_covariance_is_scaled_identity():
    model, sensor = _sensor()
    sensor.state = plant.BAD
    assert_allclose(sensor.current_w(), 30.0 * np.eye(4))
    sensor.state = plant.GOOD
    assert_allclose(sensor.current_w(), np.eye(4))


def test_markov_rows_must_sum_to_one():
    with pytest.raises(ValueError, match="sum to 1"):
        plant.SensorModel(np.eye(2), np.array([[0.9, 0.3], [0.1, 0.9]]),
                          np.eye(2), 30 * np.eye(2))


def test_observe_identity_and_masking():
    model = plant.build_default_model(0.1)
    c_eye = plant.SensorModel(np.eye(8), np.array([[0.9, 0.1], [0.1, 0.9]]),
                              np.eye(8), 30 * np.eye(8))
    x = np.arange(8.0)
    assert_allclose(plant.observe(c_eye, x, None), x)

    rng = np.random.default_rng(3)
    masked = plant.make_sensor(rng, model, n_y=5, visible="ctl")
    x2 = x.copy()
    x2[4:] += 99.0
    assert_allclose(plant.observe(masked, x, None), plant.observe(masked, x2, None))


def test_observe_sample_covariance_matches_w():
    model, sensor = _sensor()
    sensor.state = plant.BAD
    rng = np.random.default_rng(11)
    x = np.zeros(8)
    clean = sensor.c @ x
    draws = np.array([plant.observe(sensor, x, rng) - clean for _ in range(100_000)])
    cov = np.cov(draws.T)
    assert np.max(np.abs(cov - 30.0 * np.eye(4))) < 0.05 * 30.0


def test_seeded_determinism_of_trajectories():
    model = plant.build_default_model(0.1)

    def run():
        rng = RngHub(77).stream("process-noise")
        x = np.zeros(8)
        out = []
        for _ in range(20):
            x = plant.step_dynamics(model, x, np.zeros(4), rng)
            out.append(x.copy())
        return np.array(out)

    assert run().tobytes() == run().tobytes()


def test_make_sensor_rejects_bad_visibility():
    model = plant.build_default_model(0.1)
    with pytest.raises(ValueError, match="visible"):
        plant.make_sensor(np.random.default_rng(0), model, n_y=3, visible="sideways")
