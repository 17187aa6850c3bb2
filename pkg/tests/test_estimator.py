"""Kalman filter against closed forms and the information-filter oracle."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sccsim import estimator, plant
from sccsim.estimator import KalmanBelief
from sccsim.rng import RngHub


def _model():
    return plant.build_default_model(0.1)


def test_predict_trivial_cases():
    model = _model()
    belief = KalmanBelief(np.zeros(8), np.zeros((8, 8)))
    pred = estimator.kf_predict(belief, model, np.zeros(4))
    assert_allclose(pred.x_hat, np.zeros(8))
    assert_allclose(pred.sigma, model.q)  # A 0 A' + Q


def test_predict_matches_matrix_oracle():
    model = _model()
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(8)
        s = rng.standard_normal((8, 8))
        s = s @ s.T
        u = rng.standard_normal(4)
        pred = estimator.kf_predict(KalmanBelief(x, s), model, u)
        assert_allclose(pred.x_hat, model.a @ x + model.b @ u, rtol=1e-12)
        assert_allclose(pred.sigma, model.a @ s @ model.a.T + model.q, rtol=1e-10)


def test_update_scalar_closed_form():
    belief = KalmanBelief(np.zeros(1), np.eye(1))
    upd = estimator.kf_update(belief, np.eye(1), np.eye(1), np.array([2.0]))
    assert_allclose(upd.x_hat, [1.0])       # K = 0.5
    assert_allclose(upd.sigma, [[0.5]])


def test_update_vanishing_gain_limit():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(4)
    sigma = np.eye(4)
    belief = KalmanBelief(x.copy(), sigma)
    c = rng.standard_normal((3, 4))
    upd = estimator.kf_update(belief, c, 1e12 * np.eye(3), rng.standard_normal(3),
                              cond_limit=1e15)
    assert np.linalg.norm(upd.x_hat - x) < 1e-6 * max(np.linalg.norm(x), 1.0)


def test_two_identical_sensors_equal_half_noise_single_update():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(4)
    s = rng.standard_normal((4, 4))
    s = s @ s.T + np.eye(4)
    c = rng.standard_normal((2, 4))
    y = rng.standard_normal(2)
    w_diag = np.array([2.0, 3.0])

    stacked_c, stacked_w, stacked_y = estimator.stack_sensors(
        [(c, w_diag, y), (c, w_diag, y)]
    )
    double = estimator.kf_update(KalmanBelief(x.copy(), s.copy()), stacked_c, stacked_w, stacked_y)
    single = estimator.kf_update(KalmanBelief(x.copy(), s.copy()), c, np.diag(w_diag / 2.0), y)
    assert_allclose(double.x_hat, single.x_hat, rtol=1e-9)
    assert_allclose(double.sigma, single.sigma, rtol=1e-9, atol=1e-12)


def test_update_rejects_singular_innovation():
    belief = KalmanBelief(np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(estimator.InnovationSingularError, match="cond"):
        estimator.kf_update(belief, np.eye(2), np.zeros((2, 2)), np.zeros(2))


def test_update_rejects_inconsistent_stacks():
    belief = KalmanBelief(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError, match="stack shapes"):
        estimator.kf_update(belief, np.eye(2), np.eye(3), np.zeros(2))


def test_sensor_order_permutation_invariance():
    rng = np.random.default_rng(3)
    model = _model()
    belief = KalmanBelief(rng.standard_normal(8), np.eye(8))
    triples = []
    for _ in range(3):
        c = rng.standard_normal((4, 8))
        w = rng.uniform(0.5, 3.0, size=4)
        y = rng.standard_normal(4)
        triples.append((c, w, y))
    a = estimator.kf_update(belief.copy(), *estimator.stack_sensors(triples))
    b = estimator.kf_update(belief.copy(), *estimator.stack_sensors(triples[::-1]))
    assert_allclose(a.x_hat, b.x_hat, atol=1e-9)
    assert_allclose(a.sigma, b.sigma, atol=1e-9)


def test_update_never_increases_covariance_trace():
    rng = np.random.default_rng(4)
    for _ in range(30):
        s = rng.standard_normal((4, 4))
        s = s @ s.T + 0.1 * np.eye(4)
        belief = KalmanBelief(rng.standard_normal(4), s)
        c = rng.standard_normal((2, 4))
        w = np.diag(rng.uniform(0.2, 5.0, size=2))
        upd = estimator.kf_update(belief, c, w, rng.standard_normal(2))
        assert np.trace(upd.sigma) <= np.trace(s) + 1e-9


def _random_episode(rng, model, slots=5):
    """Simulate and filter one short episode; returns beliefs from both code
    paths plus the (observations, controls) fed to the oracle."""
    x = rng.standard_normal(8)
    belief = KalmanBelief(x.copy(), 1e-4 * np.eye(8))
    observations = []
    controls = []
    seq = belief.copy()
    seq_beliefs = []
    for _ in range(slots):
        u = rng.standard_normal(4)
        x = model.a @ x + model.b @ u + np.linalg.cholesky(model.q) @ rng.standard_normal(8)
        active = []
        for _ in range(int(rng.integers(1, 3))):
            c = rng.standard_normal((3, 8))
            w = rng.uniform(0.5, 4.0, size=3)
            y = c @ x + np.sqrt(w) * rng.standard_normal(3)
            active.append((c, w, y))
        observations.append(active)
        controls.append(u)
        seq = estimator.kf_predict(seq, model, u)
        c_stack, w_stack, y_stack = estimator.stack_sensors(active)
        seq = estimator.kf_update(seq, c_stack, w_stack, y_stack)
        seq_beliefs.append(seq.copy())
    oracle = estimator.kf_batch_oracle(model, KalmanBelief(belief.x_hat, belief.sigma),
                                       observations, controls)
    return seq_beliefs, oracle


def test_sequential_filter_matches_information_oracle():
    model = _model()
    rng = np.random.default_rng(5)
    for _ in range(100):
        seq, oracle = _random_episode(rng, model)
        for a, b in zip(seq, oracle):
            assert_allclose(a.x_hat, b.x_hat, atol=1e-8)
            assert_allclose(a.sigma, b.sigma, atol=1e-8)


def test_oracle_single_step_reduces_to_update():
    model = _model()
    rng = np.random.default_rng(6)
    belief = KalmanBelief(rng.standard_normal(8), np.eye(8))
    c = rng.standard_normal((4, 8))
    w = rng.uniform(0.5, 2.0, size=4)
    y = rng.standard_normal(4)
    u = rng.standard_normal(4)
    oracle = estimator.kf_batch_oracle(model, belief.copy(), [[(c, w, y)]], [u])[0]
    seq = estimator.kf_update(estimator.kf_predict(belief, model, u),
                              *estimator.stack_sensors([(c, w, y)]))
    assert_allclose(oracle.x_hat, seq.x_hat, atol=1e-9)


def test_noiseless_plant_identifiability():
    model = plant.build_default_model(0.1, q_scale=0.0)
    # zero process noise and near-zero observation noise recover the state
    rng = np.random.default_rng(7)
    x = rng.standard_normal(8)
    belief = KalmanBelief(np.zeros(8), 10.0 * np.eye(8))
    c = np.eye(8)
    for _ in range(12):
        u = np.zeros(4)
        x = model.a @ x
        belief = estimator.kf_predict(belief, model, u)
        belief = estimator.kf_update(belief, c, 1e-12 * np.eye(8), c @ x, cond_limit=np.inf)
    assert np.linalg.norm(belief.x_hat - x) < 1e-4


def test_covariance_stays_symmetric_psd_over_500_slots():
    model = _model()
    spec_sensors = [plant.make_sensor(np.random.default_rng(i), model, n_y=5) for i in range(2)]
    hub = RngHub(8)
    rng = hub.stream("episode")
    belief = KalmanBelief(np.zeros(8), 1e-4 * np.eye(8))
    x = np.zeros(8)
    for t in range(500):
        u = rng.standard_normal(4) * 0.1
        x = plant.step_dynamics(model, x, u, hub.stream("process-noise"))
        active = []
        for i, s in enumerate(spec_sensors):
            plant.markov_step(s, hub.stream(f"markov-{i}"))
            y = plant.observe(s, x, hub.stream(f"obs-{i}"))
            active.append((s.c, np.diag(s.current_w()), y))
        belief = estimator.kf_predict(belief, model, u)
        belief = estimator.kf_update(belief, *estimator.stack_sensors(active))
        asym = np.max(np.abs(belief.sigma - belief.sigma.T))
        assert asym <= 1e-9
        assert np.linalg.eigvalsh(belief.sigma).min() >= -1e-9


def test_w_floor_applied_in_stack():
    c_stack, w_stack, y_stack = estimator.stack_sensors(
        [(np.eye(2), np.array([0.0, 1e-9]), np.zeros(2))]
    )
    assert w_stack[0, 0] == estimator.W_FLOOR
    assert w_stack[1, 1] == estimator.W_FLOOR
