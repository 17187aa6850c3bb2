"""Per-sensor semantic compression.

A recurrent autoencoder turns each sensor's observation into a short latent
vector, quantized at a per-slot bit width, and reconstructs on the far side
both the observation and a per-dimension confidence used by the filter.
Three training regimes target the three goal levels: observation
reconstruction (level 1, offline), state-estimation error through one filter
step per slot (level 2, offline), and closed-loop control cost through the
full loop (level 3, end-to-end). A non-recurrent variant of the same stacks
(`variant="ae"`) serves as the memoryless baseline.

Encoder: [y, diag(W), z_prev] -> MLP -> GRU -> linear -> tanh -> quantize.
Decoder: [z, diag(W), r/6] -> linear -> GRU -> MLP -> (y_hat, zeta), with
zeta mapped positive via softplus and floored. Zero-bit slots transmit
nothing: the encoder/decoder hidden states still advance, the decoder sees
the all-zero codeword, and loss accounting treats the reconstruction as the
zero vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import estimator, nn
from .autodiff import Tensor
from .controller import LqrGain
from .plant import SystemModel, SensorModel

RATE_SET = (0, 1, 2, 3, 4, 5, 6)
TRAIN_RATES = (1, 2, 3, 4, 5, 6)
ZETA_FLOOR = 1e-6


def quantize(values, r_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform mid-rise quantization of values in [-1, 1] to r_bits per
    element; returns (codeword indices, reconstruction). r_bits = 0 is
    rejected - callers must use the zero-transmission path instead."""
    if int(r_bits) == 0:
        raise ValueError("quantize: r_bits=0 means no transmission; no codeword exists")
    if int(r_bits) not in RATE_SET:
        raise ValueError(f"quantize: r_bits must be in {RATE_SET}, got {r_bits}")
    arr = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    return ad.quantize_midrise(arr, int(r_bits))


def bits_for(n_z: int, r_bits: int) -> int:
    """Total bits transmitted for one latent: N_z * r."""
    return int(n_z) * int(r_bits)


@dataclass(frozen=True)
class CodecConfig:
    """Architecture description. Defaults are the full-size stacks; tests and
    desk-scale training shrink the hidden widths but keep the topology.

    input_scale / noise_scale are fixed preprocessing constants: observations
    enter (and reconstructions leave) the network divided by input_scale, the
    noise diagonal input is divided by noise_scale, and the uncertainty head
    is scaled by input_scale**2 back to observation-variance units. They keep
    the first layers in their responsive range when absolute observation
    magnitudes grow over long episodes.
    """

    n_y: int
    n_z: int
    variant: str = "gru-ae"
    mlp_hidden: tuple[int, int, int] = (512, 2048, 512)
    gru_hidden: int = 512
    input_scale: float = 1.0
    noise_scale: float = 1.0
    dtype: type = np.float64

    def __post_init__(self):
        if self.variant not in ("gru-ae", "ae"):
            raise ValueError(f"CodecConfig: variant must be gru-ae|ae, got {self.variant!r}")
        if self.variant == "ae":
            h1, _, h3 = self.mlp_hidden
            if h3 != self.gru_hidden or h1 != self.gru_hidden:
                raise ValueError(
                    "CodecConfig: ae variant replaces the GRU with identity, so "
                    f"mlp_hidden[0] and mlp_hidden[2] must equal gru_hidden "
                    f"(got {self.mlp_hidden} vs {self.gru_hidden})"
                )

    @property
    def enc_in(self) -> int:
        return 2 * self.n_y + self.n_z

    @property
    def dec_in(self) -> int:
        return self.n_z + self.n_y + 1


@dataclass
class CodecState:
    """Recurrent carry for one sensor within one episode."""

    h_enc: Tensor
    h_dec: Tensor
    z_prev: Tensor

    def detach(self) -> "CodecState":
        return CodecState(self.h_enc.detach(), self.h_dec.detach(), self.z_prev.detach())


class Codec(nn.Module):
    """Encoder/decoder pair for one sensor."""

    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        self.config = config
        h1, h2, h3 = config.mlp_hidden
        dt = config.dtype
        self.enc_mlp1 = nn.MLP([config.enc_in, h1, h2, h3], rng, dt, prefix="enc.mlp1")
        self.enc_gru = nn.GRUCell(h3, config.gru_hidden, rng, dt, prefix="enc.gru")
        self.enc_out = nn.Linear(config.gru_hidden, config.n_z, rng, dt, prefix="enc.out")
        self.dec_mlp1 = nn.MLP([config.dec_in, h1], rng, dt, prefix="dec.mlp1")
        self.dec_gru = nn.GRUCell(h1, config.gru_hidden, rng, dt, prefix="dec.gru")
        self.dec_mlp2 = nn.MLP(
            [config.gru_hidden, h2, h3, 2 * config.n_y], rng, dt, prefix="dec.mlp2",
            activate_last=False,
        )

    def parameters(self):
        out = {}
        for mod in (self.enc_mlp1, self.enc_gru, self.enc_out,
                    self.dec_mlp1, self.dec_gru, self.dec_mlp2):
            out.update(mod.parameters())
        return out

    def initial_state(self, batch: int = 1) -> CodecState:
        zeros_z = Tensor(np.zeros((batch, self.config.n_z), dtype=self.config.dtype))
        return CodecState(
            h_enc=self.enc_gru.initial_state(batch),
            h_dec=self.dec_gru.initial_state(batch),
            z_prev=zeros_z,
        )

    def _as_tensor(self, value, name: str, cols: int, batch: int | None) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=self.config.dtype))
        if t.ndim == 1:
            t = ad.reshape(t, (1, t.shape[0]))
        if t.ndim != 2 or t.shape[1] != cols or (batch is not None and t.shape[0] != batch):
            want = (batch if batch is not None else "B", cols)
            raise ad.ShapeError(f"codec {name}: shape {t.shape} incompatible with {want}")
        return t

    def encode(self, y, diag_w, z_prev, h_enc: Tensor, r_bits: int,
               smooth_quantizer: bool = False):
        """One encoder slot. Returns (indices, z_values, h_enc').

        r_bits=0 produces no codeword (indices and z_values are None) but the
        hidden state still advances. smooth_quantizer replaces the hard
        quantizer by its straight-through surrogate (clip) in the forward
        pass too, which makes the whole rollout finite-difference checkable;
        no codeword indices exist in that mode.
        """
        if int(r_bits) not in RATE_SET:
            raise ValueError(f"encode: r_bits must be in {RATE_SET}, got {r_bits}")
        batch = h_enc.shape[0]
        y = self._as_tensor(y, "encode y", self.config.n_y, batch)
        diag_w = self._as_tensor(diag_w, "encode diag_w", self.config.n_y, batch)
        z_prev = self._as_tensor(z_prev, "encode z_prev", self.config.n_z, batch)
        y = ad.scalar_mul(y, 1.0 / self.config.input_scale)
        diag_w = ad.scalar_mul(diag_w, 1.0 / self.config.noise_scale)

        feat = self.enc_mlp1(ad.concat([y, diag_w, z_prev], axis=1))
        if self.config.variant == "gru-ae":
            h_new = self.enc_gru(feat, h_enc)
            feat = h_new
        else:
            h_new = h_enc
        z_tilde = ad.tanh(self.enc_out(feat))
        if int(r_bits) == 0:
            return None, None, h_new
        if smooth_quantizer:
            return None, ad.clip(z_tilde, -1.0, 1.0), h_new
        indices, _ = ad.quantize_midrise(z_tilde.data, int(r_bits))
        z_values = ad.quantize_ste(z_tilde, int(r_bits))
        return indices, z_values, h_new

    def decode(self, z_values, diag_w, r_bits: int, h_dec: Tensor):
        """One decoder slot. Returns (y_hat, zeta, h_dec').

        z_values=None marks a zero-transmission slot: the decoder consumes
        the all-zero codeword and the caller must exclude this sensor from
        the filter stack (loss accounting uses the zero reconstruction).
        """
        if int(r_bits) not in RATE_SET:
            raise ValueError(f"decode: r_bits must be in {RATE_SET}, got {r_bits}")
        batch = h_dec.shape[0]
        if z_values is None:
            z = Tensor(np.zeros((batch, self.config.n_z), dtype=self.config.dtype))
        else:
            z = self._as_tensor(z_values, "decode z", self.config.n_z, batch)
        diag_w = self._as_tensor(diag_w, "decode diag_w", self.config.n_y, batch)
        diag_w = ad.scalar_mul(diag_w, 1.0 / self.config.noise_scale)
        r_col = Tensor(np.full((batch, 1), int(r_bits) / 6.0, dtype=self.config.dtype))

        feat = self.dec_mlp1(ad.concat([z, diag_w, r_col], axis=1))
        if self.config.variant == "gru-ae":
            h_new = self.dec_gru(feat, h_dec)
            feat = h_new
        else:
            h_new = h_dec
        out = self.dec_mlp2(feat)
        y_hat = ad.scalar_mul(ad.slice_(out, 0, self.config.n_y, axis=1), self.config.input_scale)
        zeta_raw = ad.slice_(out, self.config.n_y, 2 * self.config.n_y, axis=1)
        floor = Tensor(np.full(zeta_raw.shape, ZETA_FLOOR, dtype=self.config.dtype))
        zeta = ad.add(
            ad.scalar_mul(nn.softplus(zeta_raw), self.config.input_scale**2), floor
        )
        return y_hat, zeta, h_new


# ---------------------------------------------------------------------------
# semantic-level losses


def _mse(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
        b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
        return ad.mean_(ad.square(ad.sub(a, b)))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def loss_l1(y, y_hat):
    """Observation reconstruction error: mean over dimensions of squared
    error. Zero-bit slots pass y_hat = 0, contributing ||y||^2 / N_y."""
    return _mse(y, y_hat)


def loss_l2(x_true, x_hat):
    """State-estimation error: mean squared error over the full state."""
    return _mse(x_true, x_hat)


def loss_l3(x_tilde_ctl, u_ctl, q_goal, r_goal):
    """Quadratic control cost x~'Q x~ + u'R u (same form as the stage cost)."""
    if isinstance(x_tilde_ctl, Tensor) or isinstance(u_ctl, Tensor):
        raise TypeError("loss_l3: tensor path uses stage_cost_t")
    x = np.asarray(x_tilde_ctl, dtype=np.float64)
    u = np.asarray(u_ctl, dtype=np.float64)
    return float(x @ np.asarray(q_goal) @ x + u @ np.asarray(r_goal) @ u)


def stage_cost_t(x_tilde: Tensor, u: Tensor, q_goal: Tensor, r_goal: Tensor) -> Tensor:
    """Batched tape stage cost. x_tilde (B,n,1), u (B,m,1); returns (B,)."""
    qx = ad.matmul(q_goal, x_tilde)
    ru = ad.matmul(r_goal, u)
    term_x = ad.sum_(ad.reshape(ad.mul(x_tilde, qx), (x_tilde.shape[0], x_tilde.shape[1])), axis=1)
    term_u = ad.sum_(ad.reshape(ad.mul(u, ru), (u.shape[0], u.shape[1])), axis=1)
    return ad.add(term_x, term_u)


# ---------------------------------------------------------------------------
# offline corpora


@dataclass
class OfflineDataset:
    """Slices of uncompressed closed-loop runs used for offline training.

    Arrays are (episodes, slots, ...): y and diag_w feed level-1 training;
    level 2 additionally threads the filter, so it needs the true states,
    the filter belief entering each slot, and the control applied before it.
    """

    y: np.ndarray
    diag_w: np.ndarray
    x: np.ndarray
    x_hat_prev: np.ndarray
    sigma_prev: np.ndarray
    u_prev: np.ndarray
    c: np.ndarray

    @property
    def n_episodes(self) -> int:
        return self.y.shape[0]

    @property
    def n_slots(self) -> int:
        return self.y.shape[1]

    def save(self, path):
        np.savez_compressed(
            path, y=self.y, diag_w=self.diag_w, x=self.x, x_hat_prev=self.x_hat_prev,
            sigma_prev=self.sigma_prev, u_prev=self.u_prev, c=self.c,
        )

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with np.load(path) as data:
            return cls(**{k: data[k] for k in data.files})


@dataclass
class TrainOpts:
    steps: int = 300
    batch: int = 64
    window: int = 32
    warmup: int = 16            # loss-free prefix slots that warm the hidden state
    lr: float = 1e-3
    grad_clip: float = 1.0
    rates: tuple[int, ...] = TRAIN_RATES
    plateau_patience: int = 50
    rollouts: int = 16          # level-3 rollouts per step
    horizon: int = 64           # level-3 rollout length


class TrainingDiverged(RuntimeError):
    pass


def _check_loss(loss_value: float, step: int, recent: list[float]):
    if not math.isfinite(loss_value):
        tail = ", ".join(f"{v:.4g}" for v in recent[-5:])
        raise TrainingDiverged(f"loss became non-finite at step {step} (recent: {tail})")


def train_codec_offline(
    level: int,
    dataset: OfflineDataset,
    config: CodecConfig,
    opts: TrainOpts,
    rng: np.random.Generator,
    model: SystemModel | None = None,
) -> tuple[Codec, list[float]]:
    """Gradient training of one sensor's codec on recorded corpora.

    level 1 minimizes reconstruction error; level 2 minimizes state
    estimation error, differentiating through one filter predict+update per
    slot (which is why it needs the plant model). Per-slot bit widths are
    sampled uniformly from opts.rates.
    """
    if level not in (1, 2):
        raise ValueError(f"train_codec_offline: level must be 1 or 2, got {level}")
    if level == 2 and model is None:
        raise ValueError("train_codec_offline: level 2 requires the plant model")

    codec = Codec(config, rng)
    params = codec.parameters()
    optim = nn.Adam(params, lr=opts.lr)
    halver = nn.PlateauHalver(optim, patience=opts.plateau_patience)
    history: list[float] = []

    n_ep, n_slots = dataset.n_episodes, dataset.n_slots
    window = min(opts.window, n_slots)
    warmup = min(opts.warmup, n_slots - window)
    dt = config.dtype

    if level == 2:
        a_c = Tensor(model.a.astype(dt))
        a_t_c = Tensor(model.a.T.astype(dt))
        b_c = Tensor(model.b.astype(dt))
        q_c = Tensor(np.broadcast_to(model.q.astype(dt), (opts.batch, model.n_x, model.n_x)).copy())
        c_c = Tensor(dataset.c.astype(dt))
        c_t_c = Tensor(dataset.c.T.astype(dt))

    for step in range(opts.steps):
        eps = rng.integers(0, n_ep, size=opts.batch)
        starts = rng.integers(0, n_slots - window - warmup + 1, size=opts.batch)
        r_slot = rng.choice(opts.rates, size=warmup + window)

        state = codec.initial_state(opts.batch)
        losses = []
        if level == 2:
            x_hat = Tensor(dataset.x_hat_prev[eps, starts].astype(dt)[:, :, None])
            sigma = Tensor(dataset.sigma_prev[eps, starts].astype(dt))
            eye_stack = Tensor(np.broadcast_to(np.eye(model.n_x, dtype=dt),
                                               (opts.batch, model.n_x, model.n_x)).copy())

        for k in range(warmup + window):
            in_warmup = k < warmup
            sl = starts + k
            y = Tensor(dataset.y[eps, sl].astype(dt))
            diag_w = Tensor(dataset.diag_w[eps, sl].astype(dt))
            r = int(r_slot[k])

            def slot_forward(x_hat_in, sigma_in, state_in):
                _, z_values, h_enc = codec.encode(y, diag_w, state_in.z_prev, state_in.h_enc, r)
                y_hat, zeta, h_dec = codec.decode(z_values, diag_w, r, state_in.h_dec)
                state_out = CodecState(h_enc, h_dec, z_values)
                if level == 1:
                    return ad.mean_(ad.square(ad.sub(y, y_hat))), x_hat_in, sigma_in, state_out
                u_prev = Tensor(dataset.u_prev[eps, sl].astype(dt)[:, :, None])
                x_pred, sigma_pred = estimator.kf_predict_t(
                    x_hat_in, sigma_in, a_c, a_t_c, b_c, q_c, u_prev)
                y_col = ad.reshape(y_hat, (opts.batch, config.n_y, 1))
                x_new, sigma_new = estimator.kf_update_t(
                    x_pred, sigma_pred, c_c, c_t_c, zeta, y_col, eye_stack)
                x_true = Tensor(dataset.x[eps, sl].astype(dt)[:, :, None])
                return ad.mean_(ad.square(ad.sub(x_true, x_new))), x_new, sigma_new, state_out

            if in_warmup:
                # warm the recurrent and filter state without taping it
                with ad.no_tape():
                    _, x_hat_w, sigma_w, state = slot_forward(
                        x_hat if level == 2 else None, sigma if level == 2 else None, state)
                if level == 2:
                    x_hat, sigma = x_hat_w, sigma_w
            else:
                if level == 2:
                    slot_loss, x_hat, sigma, state = slot_forward(x_hat, sigma, state)
                else:
                    slot_loss, _, _, state = slot_forward(None, None, state)
                losses.append(slot_loss)

        loss = ad.scalar_mul(losses[0], 1.0 / window)
        for extra in losses[1:]:
            loss = ad.add(loss, ad.scalar_mul(extra, 1.0 / window))

        value = loss.item()
        _check_loss(value, step, history)
        history.append(value)
        optim.zero_grad()
        ad.backward(loss)
        nn.clip_grad_norm(params, opts.grad_clip)
        optim.step()
        halver.update(value)
    return codec, history


@dataclass
class LoopSetup:
    """Everything a differentiable closed-loop rollout needs.

    start_radius > 0 scatters rollout starting positions (and their matching
    references) uniformly over that square so short training rollouts cover
    the absolute-position range long evaluation episodes reach.
    """

    model: SystemModel
    gain: LqrGain
    sensor: SensorModel
    x0: np.ndarray
    sigma0: np.ndarray
    random_heading: bool = True  # resample unit-speed initial velocities per rollout
    start_radius: float = 0.0


def _initial_states(setup: LoopSetup, batch: int, rng: np.random.Generator) -> np.ndarray:
    x0 = np.broadcast_to(setup.x0, (batch, setup.model.n_x)).copy()
    if setup.random_heading:
        for blk in (0, setup.model.n_x_ctl):
            theta = rng.uniform(0.0, 2.0 * np.pi, size=batch)
            x0[:, blk + 2] = np.cos(theta)
            x0[:, blk + 3] = np.sin(theta)
    if setup.start_radius > 0.0:
        for blk in (0, setup.model.n_x_ctl):
            x0[:, blk : blk + 2] += rng.uniform(
                -setup.start_radius, setup.start_radius, size=(batch, 2)
            )
    return x0


def train_codec_l3(
    setup: LoopSetup,
    config: CodecConfig,
    opts: TrainOpts,
    rng: np.random.Generator,
) -> tuple[Codec, list[float]]:
    """End-to-end training on the control objective.

    Each step simulates opts.rollouts closed-loop rollouts of opts.horizon
    slots entirely on the tape - encode, quantize (straight-through), decode,
    filter predict+update, feedback law, plant step - and descends the mean
    stage cost. The feedback gain stays fixed; codec parameters are shared
    across all slots.
    """
    codec = Codec(config, rng)
    params = codec.parameters()
    optim = nn.Adam(params, lr=opts.lr)
    halver = nn.PlateauHalver(optim, patience=opts.plateau_patience)
    history: list[float] = []
    for step in range(opts.steps):
        loss = rollout_cost_t(codec, setup, opts.rollouts, opts.horizon, rng)
        value = loss.item()
        _check_loss(value, step, history)
        history.append(value)
        optim.zero_grad()
        ad.backward(loss)
        nn.clip_grad_norm(params, opts.grad_clip)
        optim.step()
        halver.update(value)
    return codec, history


def rollout_cost_t(
    codec: Codec,
    setup: LoopSetup,
    batch: int,
    horizon: int,
    rng: np.random.Generator,
    rates: tuple[int, ...] = TRAIN_RATES,
    smooth_quantizer: bool = False,
    warmup: int = 0,
) -> Tensor:
    """Mean stage cost of a batch of on-tape closed-loop rollouts.

    The first `warmup` slots run the same loop untaped (no cost, no
    gradient) so the scored window starts from warm recurrent and filter
    states like a long evaluation episode would."""
    model, gain, sensor = setup.model, setup.gain, setup.sensor
    cfg = codec.config
    dt = cfg.dtype
    n_x, n_ctl = model.n_x, model.n_x_ctl
    n_y = sensor.n_y

    a_c = Tensor(model.a.astype(dt))
    a_t_c = Tensor(model.a.T.astype(dt))
    b_c = Tensor(model.b.astype(dt))
    q_c = Tensor(np.broadcast_to(model.q.astype(dt), (batch, n_x, n_x)).copy())
    c_c = Tensor(sensor.c.astype(dt))
    c_t_c = Tensor(sensor.c.T.astype(dt))
    neg_k = Tensor((-gain.k).astype(dt))
    q_goal_c = Tensor(gain.q_goal.astype(dt))
    r_goal_c = Tensor(gain.r_goal.astype(dt))
    eye_stack = Tensor(np.broadcast_to(np.eye(n_x, dtype=dt), (batch, n_x, n_x)).copy())

    x0 = _initial_states(setup, batch, rng)
    x = Tensor(x0[:, :, None].astype(dt))
    desired = x0.copy()
    x_hat = Tensor(x0[:, :, None].astype(dt))
    sigma = Tensor(np.broadcast_to(setup.sigma0.astype(dt), (batch, n_x, n_x)).copy())
    state = codec.initial_state(batch)

    # noise, sensor quality, and per-slot rates drawn up front
    total_slots = warmup + horizon
    chol_q = np.linalg.cholesky(model.q) if np.any(model.q) else np.zeros_like(model.q)
    v_all = rng.standard_normal((total_slots, batch, n_x)) @ chol_q.T
    w_unit = rng.standard_normal((total_slots, batch, n_y))
    states_good = np.empty((total_slots, batch), dtype=bool)
    good = np.full(batch, sensor.state == "good")
    p_gg, p_bb = sensor.markov[0, 0], sensor.markov[1, 1]
    for t in range(total_slots):
        u01 = rng.random(batch)
        good = np.where(good, u01 < p_gg, u01 >= p_bb)
        states_good[t] = good
    r_slot = rng.choice(rates, size=total_slots)
    w_good_d = np.diag(sensor.w_good)
    w_bad_d = np.diag(sensor.w_bad)

    def control(x_hat_t: Tensor, x_src: Tensor, des: np.ndarray):
        des_ctl = Tensor(des[:, :n_ctl, None].astype(dt))
        des_unc = Tensor(des[:, n_ctl:, None].astype(dt))
        u_ctl = ad.matmul(neg_k, ad.sub(ad.slice_(x_hat_t, 0, n_ctl, axis=1), des_ctl))
        u_unc = ad.matmul(neg_k, ad.sub(ad.slice_(x_src, n_ctl, n_x, axis=1), des_unc))
        return u_ctl, ad.concat([u_ctl, u_unc], axis=1)

    total = None
    _, u_prev = control(x_hat, x, desired)  # initial states are constants
    for t in range(total_slots):
        in_warmup = t < warmup

        def run_slot(x, desired, state, x_hat, sigma, u_prev):
            v = Tensor(v_all[t][:, :, None].astype(dt))
            x = ad.add(ad.add(ad.matmul(a_c, x), ad.matmul(b_c, u_prev)), v)
            desired = desired @ model.a.T

            w_diag_np = np.where(states_good[t][:, None], w_good_d, w_bad_d)
            w_noise = Tensor((w_unit[t] * np.sqrt(w_diag_np))[:, :, None].astype(dt))
            y = ad.add(ad.matmul(c_c, x), w_noise)
            y_row = ad.reshape(y, (batch, n_y))
            diag_w = Tensor(w_diag_np.astype(dt))

            r = int(r_slot[t])
            _, z_values, h_enc = codec.encode(y_row, diag_w, state.z_prev, state.h_enc, r,
                                              smooth_quantizer=smooth_quantizer)
            y_hat, zeta, h_dec = codec.decode(z_values, diag_w, r, state.h_dec)
            state = CodecState(h_enc, h_dec, z_values)

            x_pred, sigma_pred = estimator.kf_predict_t(x_hat, sigma, a_c, a_t_c, b_c, q_c, u_prev)
            y_col = ad.reshape(y_hat, (batch, n_y, 1))
            x_hat, sigma = estimator.kf_update_t(x_pred, sigma_pred, c_c, c_t_c, zeta, y_col, eye_stack)

            u_ctl, u_prev = control(x_hat, x, desired)
            x_tilde = ad.sub(ad.slice_(x, 0, n_ctl, axis=1),
                             Tensor(desired[:, :n_ctl, None].astype(dt)))
            cost_t = stage_cost_t(x_tilde, u_ctl, q_goal_c, r_goal_c)
            return x, desired, state, x_hat, sigma, u_prev, cost_t

        if in_warmup:
            with ad.no_tape():
                x, desired, state, x_hat, sigma, u_prev, _ = run_slot(
                    x, desired, state, x_hat, sigma, u_prev)
        else:
            x, desired, state, x_hat, sigma, u_prev, cost_t = run_slot(
                x, desired, state, x_hat, sigma, u_prev)
            total = cost_t if total is None else ad.add(total, cost_t)

    return ad.scalar_mul(ad.mean_(total), 1.0 / horizon)
