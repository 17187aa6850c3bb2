"""Scenario presets, experiment configuration, and world construction.

Two presets mirror the two studies: ``single_sensor`` (one wide sensor
seeing both targets, latent dimension 3, random unit-speed initial headings,
Markov-driven sensing quality) and ``multi_sensor`` (four sensors with
latent dimension 1, sensors 1-2 seeing only the controllable block and 3-4
only the uncontrollable one, fixed headings, and a four-window good/bad
schedule over 500 slots for evaluation).

Everything is plain key-value data and can be loaded from / overridden by a
YAML file; every run writes back its fully resolved configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .. import controller, plant
from ..codec import CodecConfig, TrainOpts
from ..rate_policy import PpoOpts
from ..rng import RngHub

RATE_MODES = ("uncompressed", "no-control", "equal", "learned")

# §V-C evaluation schedule: four 125-slot windows of per-sensor good/bad states.
MULTI_SENSOR_SCHEDULE = (
    ("good", "bad", "good", "bad"),
    ("good", "bad", "bad", "good"),
    ("bad", "good", "good", "bad"),
    ("bad", "good", "bad", "good"),
)


@dataclass(frozen=True)
class ScenarioSpec:
    """World description: plant scale, sensors, initial conditions, horizon."""

    name: str
    dt: float = 0.1
    q_scale: float = 1.0
    n_sensors: int = 1
    n_y: int = 20
    n_z: int = 3
    visibility: tuple[str, ...] = ("both",)
    c_scale: float = 0.2
    p_stay_good: float = 0.9
    p_stay_bad: float = 0.9
    w_bad_factor: float = 30.0
    random_heading: bool = True
    init_v_ctl: tuple[float, float] = (1.0, 0.0)
    init_v_unctl: tuple[float, float] = (0.0, 1.0)
    sigma0_scale: float = 1e-4
    horizon: int = 500
    window_states: tuple[tuple[str, ...], ...] | None = None

    def schedule(self, horizon: int | None = None) -> np.ndarray | None:
        """Expand window states to one row of per-sensor states per slot."""
        if self.window_states is None:
            return None
        horizon = horizon or self.horizon
        n_windows = len(self.window_states)
        per = int(np.ceil(horizon / n_windows))
        rows = []
        for states in self.window_states:
            rows.extend([list(states)] * per)
        return np.array(rows[:horizon], dtype=object)

    def window_bounds(self, horizon: int | None = None) -> list[tuple[int, int]]:
        """Slot ranges [start, stop) of each schedule window (1-based slots)."""
        if self.window_states is None:
            return []
        horizon = horizon or self.horizon
        per = int(np.ceil(horizon / len(self.window_states)))
        return [(i * per + 1, min((i + 1) * per, horizon) + 1)
                for i in range(len(self.window_states))]


PRESETS: dict[str, ScenarioSpec] = {
    "single_sensor": ScenarioSpec(
        name="single_sensor",
        n_sensors=1,
        n_y=20,
        n_z=3,
        visibility=("both",),
        random_heading=True,
    ),
    "multi_sensor": ScenarioSpec(
        name="multi_sensor",
        n_sensors=4,
        n_y=20,
        n_z=1,
        visibility=("ctl", "ctl", "unctl", "unctl"),
        random_heading=False,
        window_states=MULTI_SENSOR_SCHEDULE,
    ),
}

# Architecture used by the experiment presets. The CodecConfig dataclass
# defaults keep the full-size stacks; runs here use desk-scale widths so the
# whole study trains on a laptop-class budget.
DESK_MLP_HIDDEN = (64, 128, 64)
DESK_GRU_HIDDEN = 64


def desk_codec_config(spec: ScenarioSpec, variant: str = "gru-ae") -> CodecConfig:
    return CodecConfig(
        n_y=spec.n_y,
        n_z=spec.n_z,
        variant=variant,
        mlp_hidden=DESK_MLP_HIDDEN,
        gru_hidden=DESK_GRU_HIDDEN,
        # positions reach ~horizon*dt state units at unit speed
        input_scale=spec.horizon * spec.dt,
        noise_scale=spec.w_bad_factor,
    )


def desk_train_opts(scenario: str, level: int) -> TrainOpts:
    if level == 3:
        return TrainOpts(steps=220, rollouts=8, horizon=32, lr=1e-3)
    return TrainOpts(steps=260, batch=32, window=16, lr=1e-3)


def desk_ppo_opts() -> PpoOpts:
    return PpoOpts(iterations=30, episodes_per_iter=12, epochs=30, sync_every=10)


@dataclass
class ExperimentConfig:
    """One run: scenario + semantic level + codec variant + rate mode."""

    scenario: str = "single_sensor"
    level: int = 3
    variant: str = "gru-ae"
    rate_mode: str = "learned"
    budget: float = 4.0
    horizon: int | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    world_seed: int = 0
    out_dir: str = "out"
    codec_checkpoints: tuple[str, ...] = ()
    policy_checkpoint: str | None = None
    dataset_path: str | None = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in PRESETS:
            raise ValueError(f"unknown scenario {self.scenario!r}; options: {sorted(PRESETS)}")
        if self.rate_mode not in RATE_MODES:
            raise ValueError(f"unknown rate mode {self.rate_mode!r}; options: {RATE_MODES}")
        if self.level not in (1, 2, 3):
            raise ValueError(f"level must be 1, 2 or 3, got {self.level}")

    @property
    def spec(self) -> ScenarioSpec:
        return PRESETS[self.scenario]

    def resolved_horizon(self) -> int:
        return self.horizon if self.horizon is not None else self.spec.horizon

    def equal_rate(self) -> int:
        """Bits per element per sensor that spends the budget uniformly."""
        spec = self.spec
        per_element = self.budget / (spec.n_sensors * spec.n_z)
        return max(0, min(6, int(per_element)))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        out["codec_checkpoints"] = list(self.codec_checkpoints)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = dict(data)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        if "codec_checkpoints" in kwargs:
            kwargs["codec_checkpoints"] = tuple(kwargs["codec_checkpoints"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def build_world(spec: ScenarioSpec, world_seed: int):
    """Deterministic plant + gain + sensors for a scenario.

    Observation matrices are keyed by (world_seed, sensor index) so every
    mode and every episode seed sees the same world.
    """
    model = plant.build_default_model(dt=spec.dt, q_scale=spec.q_scale)
    gain = plant.default_gain(model)
    hub = RngHub(world_seed)
    sensors = []
    for i in range(spec.n_sensors):
        sensors.append(
            plant.make_sensor(
                hub.stream(f"sensor-{i}-cmatrix"),
                model,
                n_y=spec.n_y,
                visible=spec.visibility[i],
                c_scale=spec.c_scale,
                p_stay_good=spec.p_stay_good,
                p_stay_bad=spec.p_stay_bad,
                w_bad_factor=spec.w_bad_factor,
            )
        )
    return model, gain, sensors


def initial_state(spec: ScenarioSpec, model, rng: np.random.Generator | None) -> np.ndarray:
    """Episode start: positions at the origin, velocities fixed by the preset
    or drawn unit-speed when the scenario randomizes headings."""
    x0 = np.zeros(model.n_x)
    if spec.random_heading:
        if rng is None:
            raise ValueError("initial_state: scenario randomizes headings but no rng given")
        for blk in (0, model.n_x_ctl):
            theta = rng.uniform(0.0, 2.0 * np.pi)
            x0[blk + 2] = np.cos(theta)
            x0[blk + 3] = np.sin(theta)
    else:
        x0[2], x0[3] = spec.init_v_ctl
        x0[model.n_x_ctl + 2], x0[model.n_x_ctl + 3] = spec.init_v_unctl
    return x0
