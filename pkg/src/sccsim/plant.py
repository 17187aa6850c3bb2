"""Ground-truth world: joint linear dynamics for a controllable and an
uncontrollable target, reference trajectories, process noise, and sensors
with a two-state Markov quality process.

State layout per target is [pos_x, pos_y, vel_x, vel_y]; the joint state
stacks the controllable block first. Both blocks share per-axis
double-integrator dynamics, and the uncontrollable target drives itself with
the ideal feedback computed from its own true state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import controller

GOOD, BAD = "good", "bad"


@dataclass(frozen=True)
class SystemModel:
    """Block-diagonal joint dynamics over the {ctl, unctl} partition."""

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    n_x_ctl: int
    n_x_unctl: int
    n_u_ctl: int
    n_u_unctl: int

    @property
    def n_x(self) -> int:
        return self.n_x_ctl + self.n_x_unctl

    @property
    def n_u(self) -> int:
        return self.n_u_ctl + self.n_u_unctl

    def split_state(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[: self.n_x_ctl], x[self.n_x_ctl :]


def double_integrator_blocks(dt: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.array(
        [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    b = np.array(
        [
            [0.5 * dt * dt, 0.0],
            [0.0, 0.5 * dt * dt],
            [dt, 0.0],
            [0.0, dt],
        ]
    )
    return a, b


def build_default_model(dt: float = 0.1, q_scale: float = 1.0) -> SystemModel:
    """Two planar double integrators (one controllable, one not), process
    noise covariance q_scale * I."""
    if dt <= 0:
        raise ValueError(f"build_default_model: dt must be positive, got {dt}")
    a_blk, b_blk = double_integrator_blocks(dt)
    a = np.block([[a_blk, np.zeros((4, 4))], [np.zeros((4, 4)), a_blk]])
    b = np.block([[b_blk, np.zeros((4, 2))], [np.zeros((4, 2)), b_blk]])
    q = q_scale * np.eye(8)
    return SystemModel(a=a, b=b, q=q, n_x_ctl=4, n_x_unctl=4, n_u_ctl=2, n_u_unctl=2)


def sample_process_noise(model: SystemModel, rng: np.random.Generator) -> np.ndarray:
    chol = np.linalg.cholesky(model.q) if np.any(model.q) else np.zeros_like(model.q)
    return chol @ rng.standard_normal(model.n_x)


def step_dynamics(model: SystemModel, x, u, rng: np.random.Generator | None) -> np.ndarray:
    """x' = A x + B u + v with v ~ N(0, Q); rng=None disables noise."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape != (model.n_x,):
        raise ValueError(f"step_dynamics: state shape {x.shape} != ({model.n_x},)")
    if u.shape != (model.n_u,):
        raise ValueError(f"step_dynamics: input shape {u.shape} != ({model.n_u},)")
    x_next = model.a @ x + model.b @ u
    if rng is not None:
        x_next = x_next + sample_process_noise(model, rng)
    return x_next


def step_desired(model: SystemModel, x_desired) -> np.ndarray:
    """Reference states evolve noise-free and input-free under A."""
    return model.a @ np.asarray(x_desired, dtype=np.float64)


_DEFAULT_GAIN_CACHE: dict[tuple, controller.LqrGain] = {}


def default_gain(model: SystemModel) -> controller.LqrGain:
    """Shared gain for both blocks (identical A, B, identity weights)."""
    a_blk = model.a[: model.n_x_ctl, : model.n_x_ctl]
    b_blk = model.b[: model.n_x_ctl, : model.n_u_ctl]
    key = (a_blk.tobytes(), b_blk.tobytes())
    gain = _DEFAULT_GAIN_CACHE.get(key)
    if gain is None:
        gain = controller.dare_solve(a_blk, b_blk, np.eye(model.n_x_ctl), np.eye(model.n_u_ctl))
        _DEFAULT_GAIN_CACHE[key] = gain
    return gain


def ideal_unctl_input(
    model: SystemModel, x_unctl, x_unctl_desired, gain: controller.LqrGain | None = None
) -> np.ndarray:
    """Self-driven target's perfect command: LQR feedback on its true state."""
    if gain is None:
        gain = default_gain(model)
    return controller.control_law(gain, x_unctl, x_unctl_desired)


@dataclass
class SensorModel:
    """Linear sensor y = C x + w with a two-state quality chain.

    The observation covariance is w_good in the good state and w_bad in the
    bad state; `markov` rows are [stay, switch] probabilities ordered
    (good, bad).
    """

    c: np.ndarray
    markov: np.ndarray
    w_good: np.ndarray
    w_bad: np.ndarray
    state: str = GOOD

    def __post_init__(self):
        rows = np.sum(self.markov, axis=1)
        if not np.allclose(rows, 1.0, atol=1e-12):
            raise ValueError(f"SensorModel: markov rows must sum to 1, got {rows}")

    @property
    def n_y(self) -> int:
        return self.c.shape[0]

    def current_w(self) -> np.ndarray:
        return self.w_good if self.state == GOOD else self.w_bad


def make_sensor(
    rng: np.random.Generator,
    model: SystemModel,
    n_y: int,
    visible: str = "both",
    c_scale: float = 0.2,
    p_stay_good: float = 0.9,
    p_stay_bad: float = 0.9,
    w_bad_factor: float = 30.0,
    state: str = GOOD,
) -> SensorModel:
    """Sensor with C entries uniform on [-c_scale, c_scale] over the visible
    state block; entries for the hidden block are zeroed so the observation
    is insensitive to it."""
    c = rng.uniform(-c_scale, c_scale, size=(n_y, model.n_x))
    if visible == "ctl":
        c[:, model.n_x_ctl :] = 0.0
    elif visible == "unctl":
        c[:, : model.n_x_ctl] = 0.0
    elif visible != "both":
        raise ValueError(f"make_sensor: visible must be ctl|unctl|both, got {visible!r}")
    markov = np.array([[p_stay_good, 1.0 - p_stay_good], [1.0 - p_stay_bad, p_stay_bad]])
    return SensorModel(
        c=c,
        markov=markov,
        w_good=np.eye(n_y),
        w_bad=w_bad_factor * np.eye(n_y),
        state=state,
    )


def markov_step(sensor: SensorModel, rng: np.random.Generator) -> str:
    """Advance the quality chain one slot and return the new state."""
    idx = 0 if sensor.state == GOOD else 1
    stay = rng.random() < sensor.markov[idx, idx]
    if not stay:
        sensor.state = BAD if sensor.state == GOOD else GOOD
    return sensor.state


def observe(sensor: SensorModel, x, rng: np.random.Generator | None) -> np.ndarray:
    """y = C x + w with w ~ N(0, W_state); rng=None disables noise."""
    y = sensor.c @ np.asarray(x, dtype=np.float64)
    if rng is not None:
        w = sensor.current_w()
        if _is_diagonal(w):
            y = y + np.sqrt(np.diag(w)) * rng.standard_normal(sensor.n_y)
        else:
            y = y + np.linalg.cholesky(w) @ rng.standard_normal(sensor.n_y)
    return y


def _is_diagonal(m: np.ndarray) -> bool:
    return np.count_nonzero(m - np.diag(np.diag(m))) == 0


@dataclass
class WorldState:
    """True joint state, its reference, and the slot index."""

    x: np.ndarray
    x_desired: np.ndarray
    t: int = 0
