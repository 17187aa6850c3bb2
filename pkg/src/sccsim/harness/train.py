"""Training orchestration: wires worlds, corpora, codecs and policies
together for the CLI and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .. import codec as codec_mod
from .. import rate_policy as rp
from ..codec import Codec, CodecConfig, LoopSetup, OfflineDataset, TrainOpts
from ..loop import RateEnv, SccLoop
from ..rng import RngHub
from .config import (
    PRESETS,
    ScenarioSpec,
    build_world,
    desk_codec_config,
    desk_ppo_opts,
    desk_train_opts,
    initial_state,
)
from .simulate import EpisodeModels, collect_offline_dataset

TRAIN_EPISODE_SLOTS = 125


def world_models(scenario: str, world_seed: int = 0) -> tuple[ScenarioSpec, EpisodeModels]:
    spec = PRESETS[scenario]
    model, gain, sensors = build_world(spec, world_seed)
    return spec, EpisodeModels(model=model, gain=gain, sensors=sensors)


def make_offline_dataset(
    scenario: str,
    sensor_idx: int = 0,
    n_episodes: int = 48,
    horizon: int | None = None,
    seed: int = 1000,
    world_seed: int = 0,
    control_excitation: float = 2.0,
) -> OfflineDataset:
    """Corpus horizon defaults to the scenario's evaluation horizon so
    training windows cover the same state magnitudes evaluation reaches;
    mild control excitation widens the deviation envelope the codecs see."""
    spec, models = world_models(scenario, world_seed)
    if horizon is None:
        horizon = spec.horizon
    return collect_offline_dataset(spec, models, sensor_idx, n_episodes, horizon, seed,
                                   control_excitation=control_excitation)


def train_sensor_codec(
    scenario: str,
    level: int,
    variant: str,
    train_seed: int,
    sensor_idx: int = 0,
    dataset: OfflineDataset | None = None,
    opts: TrainOpts | None = None,
    arch: CodecConfig | None = None,
    world_seed: int = 0,
) -> tuple[Codec, list[float]]:
    """Train one sensor's codec at one goal level.

    Levels 1 and 2 need an offline corpus for that sensor; level 3 embeds
    the codec in differentiable closed-loop rollouts.
    """
    spec, models = world_models(scenario, world_seed)
    arch = arch or desk_codec_config(spec, variant)
    opts = opts or desk_train_opts(scenario, level)
    rng = RngHub(train_seed).stream(f"codec-train-L{level}-{variant}-sensor{sensor_idx}")

    if level in (1, 2):
        if dataset is None:
            raise ValueError("levels 1 and 2 require an offline dataset")
        return codec_mod.train_codec_offline(level, dataset, arch, opts, rng, model=models.model)

    if spec.random_heading:
        x0 = np.zeros(models.model.n_x)
    else:
        x0 = initial_state(spec, models.model, None)
    # short rollouts must see the absolute positions long evaluation
    # episodes reach (speed is ~1 state unit per slot-second)
    start_radius = spec.horizon * spec.dt
    setup = LoopSetup(
        model=models.model,
        gain=models.gain,
        sensor=models.sensors[sensor_idx],
        x0=x0,
        sigma0=spec.sigma0_scale * np.eye(models.model.n_x),
        random_heading=spec.random_heading,
        start_radius=start_radius,
    )
    return codec_mod.train_codec_l3(setup, arch, opts, rng)


def make_rate_env(
    scenario: str,
    level: int,
    codecs: list[Codec],
    budget: float,
    horizon: int = TRAIN_EPISODE_SLOTS,
    world_seed: int = 0,
    use_schedule: bool = False,
) -> RateEnv:
    """Closed-loop environment with frozen codecs for policy training.

    Training runs the Markov quality chains; evaluation episodes switch to
    the fixed scenario schedule via use_schedule=True.
    """
    spec, models = world_models(scenario, world_seed)
    sigma0 = spec.sigma0_scale * np.eye(models.model.n_x)
    schedule = spec.schedule(horizon) if use_schedule else None

    def factory(seed: int) -> SccLoop:
        hub = RngHub(seed)
        x0 = initial_state(spec, models.model, hub.stream("init-state") if spec.random_heading else None)
        return SccLoop(
            model=models.model, gain=models.gain, sensors=models.sensors,
            codecs=codecs, level=level, hub=hub, x0=x0, sigma0=sigma0, schedule=schedule,
        )

    return RateEnv(
        factory, level, budget, horizon,
        n_z=(spec.n_z,) * spec.n_sensors, n_y=spec.n_y, n_x=models.model.n_x,
        n_sensors=spec.n_sensors,
    )


def train_rate_policy_run(
    scenario: str,
    level: int,
    codecs: list[Codec],
    budget: float,
    train_seed: int,
    opts: rp.PpoOpts | None = None,
    horizon: int = TRAIN_EPISODE_SLOTS,
    world_seed: int = 0,
) -> tuple[rp.RatePolicy, list[dict]]:
    opts = opts or desk_ppo_opts()
    env = make_rate_env(scenario, level, codecs, budget, horizon=horizon, world_seed=world_seed)
    hub = RngHub(train_seed)
    return rp.train_rate_policy(
        level,
        env,
        opts,
        rng_init=hub.stream("policy-init"),
        rng_episodes=hub.stream("ppo-episode-seeds"),
        rng_actions=hub.stream("ppo-actions"),
    )
