"""Kalman filtering over fused multi-sensor observations.

Two code paths live here on purpose. The production filter
(`kf_predict`/`kf_update`) is the gain-form recursion used by every
simulation; `kf_batch_oracle` recomputes filtered means through the
information form and exists solely so tests can cross-check the two.
There are also tensor versions of predict/update (`kf_predict_t`,
`kf_update_t`) that run on the autodiff tape so training can differentiate
through one filter step per slot.

Sensors granted zero bits in a slot are excluded from the stacked update
entirely (the zero-reconstruction convention applies to loss accounting
only). Decoder-estimated covariances replace the prior ones in the stack
when available, floored elementwise so the innovation stays invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .plant import SystemModel

W_FLOOR = 1e-6
_EIG_TOL = -1e-9


class InnovationSingularError(RuntimeError):
    pass


@dataclass
class KalmanBelief:
    """State estimate with its error covariance (kept symmetric PSD)."""

    x_hat: np.ndarray
    sigma: np.ndarray

    def copy(self) -> "KalmanBelief":
        return KalmanBelief(self.x_hat.copy(), self.sigma.copy())


def _symmetrize_psd(sigma: np.ndarray) -> np.ndarray:
    sigma = 0.5 * (sigma + sigma.T)
    eigvals = np.linalg.eigvalsh(sigma)
    low = float(eigvals.min())
    if low < _EIG_TOL:
        raise ValueError(f"covariance lost positive semidefiniteness (min eigenvalue {low:.3e})")
    if low < 0.0:
        w, v = np.linalg.eigh(sigma)
        sigma = (v * np.clip(w, 0.0, None)) @ v.T
        sigma = 0.5 * (sigma + sigma.T)
    return sigma


def kf_predict(belief: KalmanBelief, model: SystemModel, u_prev) -> KalmanBelief:
    """x_pred = A x + B u,  Sigma_pred = A Sigma A' + Q."""
    u_prev = np.asarray(u_prev, dtype=np.float64)
    x_pred = model.a @ belief.x_hat + model.b @ u_prev
    sigma_pred = model.a @ belief.sigma @ model.a.T + model.q
    return KalmanBelief(x_pred, _symmetrize_psd(sigma_pred))


def kf_update(
    belief: KalmanBelief,
    c_stack: np.ndarray,
    w_stack: np.ndarray,
    y_stack: np.ndarray,
    cond_limit: float = 1e12,
) -> KalmanBelief:
    """Gain-form correction with stacked sensors.

    K = Sigma C' (C Sigma C' + W)^-1; x += K (y - C x); Sigma = (I - K C) Sigma,
    then symmetrized. A near-singular innovation covariance is rejected with
    its condition number in the message.
    """
    c = np.asarray(c_stack, dtype=np.float64)
    w = np.asarray(w_stack, dtype=np.float64)
    y = np.asarray(y_stack, dtype=np.float64)
    if c.shape[0] != y.shape[0] or w.shape != (c.shape[0], c.shape[0]):
        raise ValueError(
            f"kf_update: inconsistent stack shapes C{c.shape} W{w.shape} y{y.shape}"
        )

    s = c @ belief.sigma @ c.T + w
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > cond_limit:
        raise InnovationSingularError(
            f"kf_update: innovation covariance ill-conditioned (cond={cond:.3e})"
        )
    gain = np.linalg.solve(s.T, c @ belief.sigma.T).T
    x_new = belief.x_hat + gain @ (y - c @ belief.x_hat)
    n = belief.sigma.shape[0]
    sigma_new = (np.eye(n) - gain @ c) @ belief.sigma
    return KalmanBelief(x_new, _symmetrize_psd(sigma_new))


def stack_sensors(
    entries: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (C, diag_w, y) triples: vertical C, block-diagonal W, concat y."""
    cs = [np.asarray(c) for c, _, _ in entries]
    ws = [np.asarray(w) for _, w, _ in entries]
    ys = [np.asarray(y) for _, _, y in entries]
    c_stack = np.vstack(cs)
    y_stack = np.concatenate(ys)
    w_stack = np.diag(np.concatenate([np.maximum(w, W_FLOOR) for w in ws]))
    return c_stack, w_stack, y_stack


def kf_batch_oracle(
    model: SystemModel,
    belief0: KalmanBelief,
    observations: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]],
    controls: list[np.ndarray],
) -> list[KalmanBelief]:
    """Filtered means via the information form - an independent code path.

    observations[t] is the list of (C, diag_w, y) triples active at slot t;
    controls[t] is the input applied between t and t+1 predictions. Returns
    the posterior belief after each slot.
    """
    out = []
    x = belief0.x_hat.copy()
    sigma = belief0.sigma.copy()
    for t, active in enumerate(observations):
        u = controls[t]
        x_pred = model.a @ x + model.b @ np.asarray(u, dtype=np.float64)
        sigma_pred = model.a @ sigma @ model.a.T + model.q
        info = np.linalg.inv(sigma_pred)
        xi = info @ x_pred
        for c, diag_w, y in active:
            w_inv = np.diag(1.0 / np.maximum(np.asarray(diag_w, dtype=np.float64), W_FLOOR))
            info = info + np.asarray(c).T @ w_inv @ np.asarray(c)
            xi = xi + np.asarray(c).T @ w_inv @ np.asarray(y)
        sigma = np.linalg.inv(info)
        sigma = 0.5 * (sigma + sigma.T)
        x = sigma @ xi
        out.append(KalmanBelief(x.copy(), sigma.copy()))
    return out


# ---------------------------------------------------------------------------
# tape versions for training (batched over rollouts)


def kf_predict_t(
    x_hat: Tensor, sigma: Tensor, a: Tensor, a_t: Tensor, b: Tensor,
    q_stack: Tensor, u_prev: Tensor,
) -> tuple[Tensor, Tensor]:
    """Batched tape prediction. x_hat (B,n,1), sigma (B,n,n); a/a_t/b are
    constant 2-d tensors, q_stack the constant (B,n,n) stacked process
    covariance, u_prev (B,m,1)."""
    x_pred = ad.add(ad.matmul(a, x_hat), ad.matmul(b, u_prev))
    sigma_pred = ad.add(ad.matmul(ad.matmul(a, sigma), a_t), q_stack)
    return x_pred, sigma_pred


def kf_update_t(
    x_pred: Tensor,
    sigma_pred: Tensor,
    c: Tensor,
    c_t: Tensor,
    w_diag: Tensor,
    y: Tensor,
    eye_stack: Tensor,
) -> tuple[Tensor, Tensor]:
    """Batched tape correction with diagonal observation covariance.

    c (n_y,n) and c_t (n,n_y) constants; w_diag (B,n_y) strictly positive;
    y (B,n_y,1); eye_stack is the constant (B,n,n) stacked identity.
    """
    s = ad.add(ad.matmul(ad.matmul(c, sigma_pred), c_t), ad.diag_embed(w_diag))
    s_inv = ad.inv(s)
    gain = ad.matmul(ad.matmul(sigma_pred, c_t), s_inv)
    innov = ad.sub(y, ad.matmul(c, x_pred))
    x_new = ad.add(x_pred, ad.matmul(gain, innov))
    sigma_new = ad.matmul(ad.sub(eye_stack, ad.matmul(gain, c)), sigma_pred)
    return x_new, sigma_new
