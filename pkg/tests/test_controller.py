"""Riccati solver, feedback law, and stage cost."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sccsim import controller, plant


def test_dare_zero_dynamics_fixed_point():
    q = np.diag([2.0, 3.0])
    gain = controller.dare_solve(np.zeros((2, 2)), np.eye(2), q, np.eye(2))
    assert_allclose(gain.p, q, atol=1e-12)
    assert_allclose(gain.k, np.zeros((2, 2)), atol=1e-12)


def test_dare_scalar_golden_ratio():
    gain = controller.dare_solve(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    assert abs(gain.p[0, 0] - golden) < 1e-10
    assert abs(gain.k[0, 0] - 1.0 / golden) < 1e-10


def test_dare_double_integrator_residual_and_stability():
    model = plant.build_default_model(0.1)
    a, b = model.a[:4, :4], model.b[:4, :2]
    gain = controller.dare_solve(a, b, np.eye(4), np.eye(2))
    assert controller.riccati_residual(gain, a, b) < 1e-9
    rho_power = controller.spectral_radius(a - b @ gain.k)
    rho_eig = float(np.max(np.abs(np.linalg.eigvals(a - b @ gain.k))))
    assert rho_power < 1.0
    # power iteration at 200 steps is a coarse estimate; plenty for the <1 gate
    assert abs(rho_power - rho_eig) < 5e-3
    # P symmetric PSD
    assert_allclose(gain.p, gain.p.T, atol=1e-12)
    assert np.linalg.eigvalsh(gain.p).min() > 0


def test_dare_rejects_singular_r():
    with pytest.raises(controller.DareError, match="positive definite"):
        controller.dare_solve(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 2)))


def test_dare_rejects_unstabilizable_system():
    # a=2 with no control authority: iteration diverges
    with pytest.raises(controller.DareError):
        controller.dare_solve(np.array([[2.0]]), np.array([[0.0]]), np.eye(1), np.eye(1),
                              max_iter=2000)


def test_spectral_radius_matches_eigenvalues_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.standard_normal((5, 5)) * 0.4
        got = controller.spectral_radius(m, iters=3000, tol=1e-12)
        want = float(np.max(np.abs(np.linalg.eigvals(m))))
        assert abs(got - want) < 2e-3


def test_control_law_zero_and_linearity():
    model = plant.build_default_model(0.1)
    gain = plant.default_gain(model)
    x = np.array([1.0, -2.0, 0.5, 0.2])
    assert_allclose(controller.control_law(gain, x, x), np.zeros(2), atol=1e-14)
    u1 = controller.control_law(gain, x, np.zeros(4))
    u3 = controller.control_law(gain, 3.0 * x, np.zeros(4))
    assert_allclose(u3, 3.0 * u1, rtol=1e-12)


def test_noiseless_closed_loop_contracts():
    model = plant.build_default_model(0.1)
    gain = plant.default_gain(model)
    a, b = model.a[:4, :4], model.b[:4, :2]
    x = np.array([5.0, -3.0, 1.0, 2.0])
    norms = []
    for _ in range(100):
        u = controller.control_law(gain, x, np.zeros(4))
        x = a @ x + b @ u
        norms.append(np.linalg.norm(x))
    # geometric decay after the transient
    ratios = [norms[t + 1] / norms[t] for t in range(10, 99) if norms[t] > 1e-12]
    assert max(ratios) < 1.0
    assert norms[-1] < 1e-2 * norms[0]


def test_stage_cost_examples_and_oracle():
    q = np.eye(4)
    r = np.eye(2)
    assert controller.lqr_stage_cost(np.zeros(4), np.zeros(2), q, r) == 0.0
    assert controller.lqr_stage_cost([1, 0, 0, 0], [2, 0], q, r) == 5.0
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.standard_normal(4)
        u = rng.standard_normal(2)
        qm = rng.standard_normal((4, 4))
        qm = qm @ qm.T
        rm = rng.standard_normal((2, 2))
        rm = rm @ rm.T + np.eye(2)
        want = float(x.T @ qm @ x + u.T @ rm @ u)
        assert_allclose(controller.lqr_stage_cost(x, u, qm, rm), want, rtol=1e-12)
        assert controller.lqr_stage_cost(x, u, qm, rm) >= 0.0
