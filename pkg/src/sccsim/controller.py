"""Discrete-time LQR: Riccati fixed point, feedback gain, stage cost.

The plant blocks here are tiny (4x4), so the Riccati equation is solved by
plain fixed-point iteration and certified by its residual plus the spectral
radius of the closed loop, rather than by a structured eigen-solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DareError(RuntimeError):
    pass


def spectral_radius(m: np.ndarray, iters: int = 200, tol: float = 1e-8, seed: int = 0) -> float:
    """Estimate the spectral radius by power iteration.

    Tracks the geometric-mean growth rate ||M^k v||^(1/k), which converges
    for complex-conjugate eigenvalue pairs as well; stops early once two
    successive estimates agree within tol.
    """
    m = np.asarray(m, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    log_growth = 0.0
    estimate = 0.0
    for k in range(1, iters + 1):
        v = m @ v
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return 0.0
        log_growth += np.log(norm)
        v /= norm
        new_estimate = float(np.exp(log_growth / k))
        if k > 10 and abs(new_estimate - estimate) < tol:
            return new_estimate
        estimate = new_estimate
    return estimate


@dataclass(frozen=True)
class LqrGain:
    """Steady-state feedback gain K with its Riccati solution P."""

    k: np.ndarray
    p: np.ndarray
    q_goal: np.ndarray
    r_goal: np.ndarray


def dare_solve(
    a: np.ndarray,
    b: np.ndarray,
    q_goal: np.ndarray,
    r_goal: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> LqrGain:
    """Solve P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q by fixed-point iteration
    and return the gain K = (R + B'PB)^-1 B'PA.

    Raises DareError when R is singular or the iteration fails to converge
    within max_iter (reported with the final update size).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    q_goal = np.asarray(q_goal, dtype=np.float64)
    r_goal = np.asarray(r_goal, dtype=np.float64)

    try:
        np.linalg.cholesky(r_goal)
    except np.linalg.LinAlgError as err:
        raise DareError("dare_solve: R_goal must be positive definite") from err

    p = q_goal.copy()
    diff = np.inf
    for it in range(max_iter):
        bpb = r_goal + b.T @ p @ b
        gain = np.linalg.solve(bpb, b.T @ p @ a)
        p_next = a.T @ p @ a - a.T @ p @ b @ gain + q_goal
        p_next = 0.5 * (p_next + p_next.T)
        diff = float(np.max(np.abs(p_next - p)))
        p = p_next
        if diff < tol:
            break
        if not np.isfinite(diff) or np.max(np.abs(p)) > 1e100:
            raise DareError(
                f"dare_solve: iteration diverging at step {it} (update size {diff:.3e}); "
                "is (A, B) stabilizable?"
            )
    else:
        raise DareError(
            f"dare_solve: no convergence after {max_iter} iterations (last update {diff:.3e})"
        )

    k = np.linalg.solve(r_goal + b.T @ p @ b, b.T @ p @ a)
    rho = spectral_radius(a - b @ k)
    if rho >= 1.0:
        raise DareError(f"dare_solve: closed loop not contractive (spectral radius {rho:.6f})")
    return LqrGain(k=k, p=p, q_goal=q_goal, r_goal=r_goal)


def riccati_residual(gain: LqrGain, a: np.ndarray, b: np.ndarray) -> float:
    """Max-abs residual of P against the Riccati right-hand side."""
    p, q, r = gain.p, gain.q_goal, gain.r_goal
    rhs = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a) + q
    return float(np.max(np.abs(rhs - p)))


def control_law(gain: LqrGain, x_hat_ctl: np.ndarray, x_desired_ctl: np.ndarray) -> np.ndarray:
    """u = -K (x_hat - x_desired): deviation feedback toward the reference."""
    return -gain.k @ (np.asarray(x_hat_ctl) - np.asarray(x_desired_ctl))


def lqr_stage_cost(x_tilde_ctl, u_ctl, q_goal, r_goal) -> float:
    """J_t = x~' Q x~ + u' R u (never negative for PSD weights)."""
    x = np.asarray(x_tilde_ctl, dtype=np.float64)
    u = np.asarray(u_ctl, dtype=np.float64)
    return float(x @ q_goal @ x + u @ r_goal @ u)
