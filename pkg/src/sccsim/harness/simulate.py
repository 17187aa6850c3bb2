"""Episode execution for all rate modes, metric recording, divergence
handling, and offline-corpus collection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec import Codec, OfflineDataset
from ..loop import SccLoop
from ..rate_policy import RatePolicy, VirtualQueue, build_context, queue_update
from ..rng import RngHub
from . import models as model_io
from .config import ExperimentConfig, ScenarioSpec, build_world, initial_state

DIVERGENCE_NORM = 1e6
METRIC_CAP = 1e6


@dataclass
class MetricRecord:
    """Per-slot metrics of one episode plus divergence bookkeeping."""

    recon_err: np.ndarray
    est_err: np.ndarray
    stage_cost: np.ndarray
    bits: np.ndarray          # (slots, sensors)
    queue_v: np.ndarray
    sensor_states: list[list[str]]
    diverged: bool = False
    diverged_slot: int = -1

    @property
    def horizon(self) -> int:
        return self.recon_err.shape[0]

    def summary(self) -> dict:
        return {
            "slots": self.horizon,
            "recon_err_mean": float(self.recon_err.mean()),
            "est_err_mean": float(self.est_err.mean()),
            "lqr_cost_mean": float(self.stage_cost.mean()),
            "bits_total": int(self.bits.sum()),
            "bits_per_slot_mean": float(self.bits.sum(axis=1).mean()),
            "queue_v_max": float(self.queue_v.max()) if self.queue_v.size else 0.0,
            "diverged": self.diverged,
            "diverged_slot": self.diverged_slot,
        }


@dataclass
class EpisodeModels:
    model: object
    gain: object
    sensors: list
    codecs: list[Codec] | None = None
    policy: RatePolicy | None = None


def build_models(config: ExperimentConfig) -> EpisodeModels:
    """World plus whatever checkpoints the rate mode requires."""
    spec = config.spec
    model, gain, sensors = build_world(spec, config.world_seed)
    codecs = None
    policy = None
    if config.rate_mode in ("equal", "learned"):
        if len(config.codec_checkpoints) != spec.n_sensors:
            raise ValueError(
                f"{config.rate_mode} mode needs {spec.n_sensors} codec checkpoints, "
                f"got {len(config.codec_checkpoints)}"
            )
        codecs = []
        for path in config.codec_checkpoints:
            codec, _ = model_io.load_codec(
                path, expect={"level": config.level, "variant": config.variant, "n_y": spec.n_y, "n_z": spec.n_z}
            )
            codecs.append(codec)
    if config.rate_mode == "learned":
        if config.policy_checkpoint is None:
            raise ValueError("learned mode needs a policy checkpoint")
        policy, _ = model_io.load_policy(config.policy_checkpoint, expect={"level": config.level})
    return EpisodeModels(model=model, gain=gain, sensors=sensors, codecs=codecs, policy=policy)


def make_loop(config: ExperimentConfig, models: EpisodeModels, seed: int,
              use_schedule: bool = True) -> SccLoop:
    spec = config.spec
    hub = RngHub(seed)
    x0 = initial_state(spec, models.model, hub.stream("init-state") if spec.random_heading else None)
    sigma0 = spec.sigma0_scale * np.eye(models.model.n_x)
    horizon = config.resolved_horizon()
    schedule = spec.schedule(horizon) if use_schedule else None
    return SccLoop(
        model=models.model,
        gain=models.gain,
        sensors=models.sensors,
        codecs=models.codecs if config.rate_mode in ("equal", "learned") else None,
        level=config.level,
        hub=hub,
        x0=x0,
        sigma0=sigma0,
        schedule=schedule,
        control_enabled=config.rate_mode != "no-control",
    )


def run_episode(config: ExperimentConfig, models: EpisodeModels, seed: int):
    """Run one episode; returns (MetricRecord, trajectory dict).

    A state-norm blowup past 1e6 marks the episode diverged: remaining slots
    are filled with capped metrics, never silently dropped.
    """
    spec = config.spec
    horizon = config.resolved_horizon()
    loop = make_loop(config, models, seed)
    queue = VirtualQueue.for_level(config.level, config.budget)
    n_sensors = spec.n_sensors

    policy = models.policy
    h_actor = h_critic = None
    if config.rate_mode == "learned":
        h_actor, h_critic = policy.initial_hidden()
    equal_r = config.equal_rate()

    recon = np.zeros(horizon)
    est = np.zeros(horizon)
    stage = np.zeros(horizon)
    bits = np.zeros((horizon, n_sensors), dtype=np.int64)
    queue_v = np.zeros(horizon)
    states: list[list[str]] = []
    traj = {
        "x_true": np.zeros((horizon, models.model.n_x)),
        "x_hat": np.zeros((horizon, models.model.n_x)),
        "x_desired": np.zeros((horizon, models.model.n_x)),
    }
    diverged = False
    diverged_slot = -1

    for t in range(horizon):
        obs = loop.begin_slot()
        if config.rate_mode in ("uncompressed", "no-control"):
            r = None
        elif config.rate_mode == "equal":
            r = np.full(n_sensors, equal_r, dtype=np.int64)
        else:
            ctx = build_context(
                config.level, obs.diag_w, queue.v,
                x_hat_prev=obs.x_hat_prev, sigma_prev=obs.sigma_prev, x_desired=obs.x_desired,
            )
            step = policy.act(ctx, h_actor, h_critic, deterministic=True)
            h_actor, h_critic = step.h_actor, step.h_critic
            r = step.r_bits
        result = loop.complete_slot(obs, r)

        recon[t] = min(result.recon_err, METRIC_CAP)
        est[t] = min(result.est_err, METRIC_CAP)
        stage[t] = min(result.stage_cost, METRIC_CAP)
        bits[t] = result.bits
        queue = queue_update(queue, float(result.bits.sum()))
        queue_v[t] = queue.v
        states.append(result.sensor_states)
        traj["x_true"][t] = result.x_true
        traj["x_hat"][t] = result.x_hat
        traj["x_desired"][t] = result.x_desired

        if np.linalg.norm(result.x_true) > DIVERGENCE_NORM:
            diverged = True
            diverged_slot = t + 1
            recon[t + 1 :] = METRIC_CAP
            est[t + 1 :] = METRIC_CAP
            stage[t + 1 :] = METRIC_CAP
            for _ in range(t + 1, horizon):
                states.append(result.sensor_states)
            traj["x_true"][t + 1 :] = result.x_true
            traj["x_hat"][t + 1 :] = result.x_hat
            traj["x_desired"][t + 1 :] = result.x_desired
            break

    record = MetricRecord(
        recon_err=recon, est_err=est, stage_cost=stage, bits=bits, queue_v=queue_v,
        sensor_states=states, diverged=diverged, diverged_slot=diverged_slot,
    )
    return record, traj


def collect_offline_dataset(
    spec: ScenarioSpec,
    models: EpisodeModels,
    sensor_idx: int,
    n_episodes: int,
    horizon: int,
    seed: int,
    control_excitation: float = 0.0,
) -> OfflineDataset:
    """Record uncompressed closed-loop runs as training corpora.

    Stores, per slot: the chosen sensor's observation and noise diagonal,
    the true state, the filter belief entering the slot, and the control
    applied before it (the filter's prediction input). control_excitation
    adds exploration noise to the applied control so the corpus also covers
    off-nominal deviations a degraded compressed loop visits.
    """
    sensor = models.sensors[sensor_idx]
    n_y, n_x, n_u = sensor.n_y, models.model.n_x, models.model.n_u
    y = np.zeros((n_episodes, horizon, n_y))
    diag_w = np.zeros((n_episodes, horizon, n_y))
    x = np.zeros((n_episodes, horizon, n_x))
    x_hat_prev = np.zeros((n_episodes, horizon, n_x))
    sigma_prev = np.zeros((n_episodes, horizon, n_x, n_x))
    u_prev = np.zeros((n_episodes, horizon, n_u))

    seed_rng = RngHub(seed).stream("dataset-episode-seeds")
    for ep in range(n_episodes):
        ep_seed = int(seed_rng.integers(0, 2**31 - 1))
        hub = RngHub(ep_seed)
        x0 = initial_state(spec, models.model, hub.stream("init-state") if spec.random_heading else None)
        loop = SccLoop(
            model=models.model, gain=models.gain, sensors=models.sensors, codecs=None,
            level=1, hub=hub, x0=x0, sigma0=spec.sigma0_scale * np.eye(n_x),
            control_excitation=control_excitation,
        )
        for t in range(horizon):
            obs = loop.begin_slot()
            y[ep, t] = obs.y[sensor_idx]
            diag_w[ep, t] = obs.diag_w[sensor_idx]
            x[ep, t] = obs.x_true
            x_hat_prev[ep, t] = obs.x_hat_prev
            sigma_prev[ep, t] = obs.sigma_prev
            u_prev[ep, t] = obs.u_prev
            loop.complete_slot(obs, None)

    return OfflineDataset(
        y=y, diag_w=diag_w, x=x, x_hat_prev=x_hat_prev, sigma_prev=sigma_prev,
        u_prev=u_prev, c=sensor.c.copy(),
    )
