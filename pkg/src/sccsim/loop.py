"""The closed sensing-communication-estimation-control chain, one slot at a
time.

Each slot splits in two phases so an allocator can sit in the middle:
``begin_slot`` advances the plant with the previous control, evolves sensor
quality, and produces the observations; ``complete_slot`` takes the chosen
per-sensor bit widths, runs the codecs, fuses what was transmitted in the
filter, applies the feedback law, and reports the slot's metrics.

All randomness comes from named substreams of one hub, so runs that differ
only in rate decisions (uncompressed vs equal vs learned) consume identical
noise sequences - the basis for paired comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codec as codec_mod
from . import controller, estimator, plant, rate_policy
from .estimator import KalmanBelief
from .rng import RngHub


@dataclass
class SlotObservation:
    """What is known before the rate decision of slot t."""

    t: int
    y: list[np.ndarray]
    diag_w: list[np.ndarray]
    sensor_states: list[str]
    x_hat_prev: np.ndarray
    sigma_prev: np.ndarray
    x_desired: np.ndarray
    u_prev: np.ndarray
    x_true: np.ndarray


@dataclass
class SlotResult:
    t: int
    recon_err: float
    est_err: float
    stage_cost: float
    bits: np.ndarray
    sensor_states: list[str]
    x_true: np.ndarray
    x_hat: np.ndarray
    x_desired: np.ndarray
    y_hat: list[np.ndarray | None]


class SccLoop:
    """One episode of the closed loop; single-threaded."""

    def __init__(
        self,
        model: plant.SystemModel,
        gain: controller.LqrGain,
        sensors: list[plant.SensorModel],
        codecs: list[codec_mod.Codec] | None,
        level: int,
        hub: RngHub,
        x0: np.ndarray,
        sigma0: np.ndarray,
        schedule: np.ndarray | None = None,
        process_noise: bool = True,
        obs_noise: bool = True,
        control_enabled: bool = True,
        control_excitation: float = 0.0,
    ):
        self.model = model
        self.gain = gain
        self.sensors = [plant.SensorModel(s.c.copy(), s.markov.copy(), s.w_good.copy(),
                                          s.w_bad.copy(), s.state) for s in sensors]
        self.codecs = codecs
        self.level = level
        self.use_decoder_cov = codecs is not None and level in (2, 3)
        self.schedule = schedule
        self.process_noise = process_noise
        self.obs_noise = obs_noise
        self.control_enabled = control_enabled
        # optional exploration noise on the applied control; corpus collection
        # uses it so codecs see off-nominal deviations, evaluation never does
        self.control_excitation = control_excitation
        self._excite_rng = hub.stream("control-excitation") if control_excitation > 0 else None

        self._proc_rng = hub.stream("process-noise") if process_noise else None
        self._obs_rngs = [hub.stream(f"sensor-{i}-obs") if obs_noise else None
                          for i in range(len(sensors))]
        self._markov_rngs = [hub.stream(f"sensor-{i}-markov") for i in range(len(sensors))]

        self.x = np.asarray(x0, dtype=np.float64).copy()
        self.x_desired = self.x.copy()
        self.belief = KalmanBelief(self.x.copy(), np.asarray(sigma0, dtype=np.float64).copy())
        self.t = 0
        self.codec_states = (
            [c.initial_state(1) for c in codecs] if codecs is not None else None
        )
        self.u_prev = self._control(self.belief.x_hat, self.x)

    def _control(self, x_hat: np.ndarray, x_true: np.ndarray) -> np.ndarray:
        n_ctl = self.model.n_x_ctl
        if self.control_enabled:
            u_ctl = controller.control_law(self.gain, x_hat[:n_ctl], self.x_desired[:n_ctl])
            if self._excite_rng is not None:
                u_ctl = u_ctl + self.control_excitation * self._excite_rng.standard_normal(
                    self.model.n_u_ctl
                )
        else:
            u_ctl = np.zeros(self.model.n_u_ctl)
        u_unctl = plant.ideal_unctl_input(
            self.model, x_true[n_ctl:], self.x_desired[n_ctl:], self.gain
        )
        return np.concatenate([u_ctl, u_unctl])

    def begin_slot(self) -> SlotObservation:
        self.t += 1
        self.x = plant.step_dynamics(self.model, self.x, self.u_prev, self._proc_rng)
        self.x_desired = plant.step_desired(self.model, self.x_desired)
        for i, sensor in enumerate(self.sensors):
            if self.schedule is not None:
                sensor.state = self.schedule[self.t - 1][i]
            else:
                plant.markov_step(sensor, self._markov_rngs[i])
        ys = [plant.observe(s, self.x, self._obs_rngs[i]) for i, s in enumerate(self.sensors)]
        return SlotObservation(
            t=self.t,
            y=ys,
            diag_w=[np.diag(s.current_w()).copy() for s in self.sensors],
            sensor_states=[s.state for s in self.sensors],
            x_hat_prev=self.belief.x_hat.copy(),
            sigma_prev=self.belief.sigma.copy(),
            x_desired=self.x_desired.copy(),
            u_prev=self.u_prev.copy(),
            x_true=self.x.copy(),
        )

    def complete_slot(self, obs: SlotObservation, r_bits: np.ndarray | None) -> SlotResult:
        """r_bits=None runs the uncompressed path (raw observations, prior
        covariances); otherwise r_bits[i] selects sensor i's bit width, with
        zero-bit sensors excluded from the filter stack."""
        n_sensors = len(self.sensors)
        entries = []
        y_hats: list[np.ndarray | None] = []
        recon_terms = []
        bits = np.zeros(n_sensors, dtype=np.int64)

        if r_bits is None:
            for i, sensor in enumerate(self.sensors):
                entries.append((sensor.c, obs.diag_w[i], obs.y[i]))
                y_hats.append(obs.y[i].copy())
                recon_terms.append(0.0)
        else:
            r_bits = np.asarray(r_bits, dtype=np.int64)
            if r_bits.shape != (n_sensors,):
                raise ValueError(f"complete_slot: r_bits shape {r_bits.shape} != ({n_sensors},)")
            with ad.no_tape():
                for i, sensor in enumerate(self.sensors):
                    cdc = self.codecs[i]
                    state = self.codec_states[i]
                    r = int(r_bits[i])
                    _, z_values, h_enc = cdc.encode(
                        obs.y[i], obs.diag_w[i], state.z_prev, state.h_enc, r
                    )
                    y_hat_t, zeta_t, h_dec = cdc.decode(z_values, obs.diag_w[i], r, state.h_dec)
                    z_next = z_values if z_values is not None else cdc.initial_state(1).z_prev
                    self.codec_states[i] = codec_mod.CodecState(h_enc, h_dec, z_next)
                    bits[i] = codec_mod.bits_for(cdc.config.n_z, r)
                    if r == 0:
                        # nothing transmitted: zero reconstruction for loss
                        # accounting, sensor left out of the filter stack
                        y_hats.append(None)
                        recon_terms.append(float(np.mean(obs.y[i] ** 2)))
                        continue
                    y_hat = y_hat_t.data[0].astype(np.float64)
                    zeta = zeta_t.data[0].astype(np.float64)
                    y_hats.append(y_hat)
                    recon_terms.append(codec_mod.loss_l1(obs.y[i], y_hat))
                    w_entry = zeta if self.use_decoder_cov else obs.diag_w[i]
                    entries.append((sensor.c, w_entry, y_hat))

        self.belief = estimator.kf_predict(self.belief, self.model, obs.u_prev)
        if entries:
            c_stack, w_stack, y_stack = estimator.stack_sensors(entries)
            self.belief = estimator.kf_update(self.belief, c_stack, w_stack, y_stack)

        u = self._control(self.belief.x_hat, self.x)
        self.u_prev = u
        n_ctl = self.model.n_x_ctl
        x_tilde = self.x[:n_ctl] - self.x_desired[:n_ctl]
        stage = controller.lqr_stage_cost(
            x_tilde, u[: self.model.n_u_ctl], self.gain.q_goal, self.gain.r_goal
        )
        est_err = codec_mod.loss_l2(self.x, self.belief.x_hat)
        return SlotResult(
            t=self.t,
            recon_err=float(np.mean(recon_terms)),
            est_err=est_err,
            stage_cost=stage,
            bits=bits,
            sensor_states=list(obs.sensor_states),
            x_true=self.x.copy(),
            x_hat=self.belief.x_hat.copy(),
            x_desired=self.x_desired.copy(),
            y_hat=y_hats,
        )


class RateEnv:
    """Episode interface the PPO trainer drives: context in, bit widths out.

    The per-slot reward is the negated drift-plus-penalty objective at the
    configured goal level, using the queue value before the slot's spend.
    """

    def __init__(self, loop_factory, level: int, budget: float, horizon: int,
                 n_z: tuple[int, ...], n_y: int, n_x: int, n_sensors: int):
        self._factory = loop_factory
        self.level = level
        self.budget = budget
        self.horizon = horizon
        self.n_z = tuple(n_z)
        self.n_sensors = n_sensors
        self.ctx_dim = rate_policy.context_dim(level, n_sensors, n_y, n_x)
        self.loop: SccLoop | None = None
        self.queue = rate_policy.VirtualQueue.for_level(level, budget)
        self._obs: SlotObservation | None = None
        self._slots_done = 0

    def _context(self) -> np.ndarray:
        obs = self._obs
        return rate_policy.build_context(
            self.level,
            obs.diag_w,
            self.queue.v,
            x_hat_prev=obs.x_hat_prev,
            sigma_prev=obs.sigma_prev,
            x_desired=obs.x_desired,
        )

    def reset(self, seed: int) -> np.ndarray:
        self.loop = self._factory(seed)
        self.queue = rate_policy.VirtualQueue.for_level(self.level, self.budget)
        self._slots_done = 0
        self._obs = self.loop.begin_slot()
        return self._context()

    def level_loss(self, result: SlotResult) -> float:
        if self.level == 1:
            # reward accounting sums reconstruction error over sensors
            return result.recon_err * self.n_sensors
        if self.level == 2:
            return result.est_err
        return result.stage_cost

    def step(self, r_bits: np.ndarray):
        result = self.loop.complete_slot(self._obs, np.asarray(r_bits))
        bits_total = float(result.bits.sum())
        rew = rate_policy.reward(self.level_loss(result), self.queue, bits_total)
        self.queue = rate_policy.queue_update(self.queue, bits_total)
        self._slots_done += 1
        info = {"bits": result.bits.copy(), "queue_v": self.queue.v, "result": result}
        if self._slots_done >= self.horizon:
            return None, rew, info
        self._obs = self.loop.begin_slot()
        return self._context(), rew, info
