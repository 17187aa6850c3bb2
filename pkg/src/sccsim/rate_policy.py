"""Per-slot, per-sensor bit allocation under a long-term budget.

A virtual queue tracks the running surplus of spent bits over the per-slot
budget; the per-slot reward combines the goal-level loss with the
drift-plus-penalty term beta * V_t * bits. A recurrent actor-critic trained
with clipped-surrogate PPO and generalized advantage estimation maps a
level-specific context sequence to one categorical distribution per sensor
over the bit widths {0..6}; the joint action factorizes across sensors, so
its log-probability is the per-sensor sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

N_RATES = 7  # bits per element 0..6

# Loss-vs-queue trade-off weight per goal level.
BETA_BY_LEVEL = {1: 0.05, 2: 0.01, 3: 0.03}


@dataclass(frozen=True)
class VirtualQueue:
    """Clamped running surplus of spent bits over the per-slot budget."""

    v: float
    r_budget: float
    beta: float

    @classmethod
    def for_level(cls, level: int, r_budget: float) -> "VirtualQueue":
        return cls(v=0.0, r_budget=float(r_budget), beta=BETA_BY_LEVEL[level])


def queue_update(queue: VirtualQueue, bits_spent: float) -> VirtualQueue:
    """V <- max(0, V + bits_spent - budget)."""
    if bits_spent < 0:
        raise ValueError(f"queue_update: bits_spent must be >= 0, got {bits_spent}")
    return replace(queue, v=max(0.0, queue.v + float(bits_spent) - queue.r_budget))


def reward(level_loss: float, queue: VirtualQueue, bits_spent: float) -> float:
    """Negated drift-plus-penalty objective: higher is better."""
    return -(float(level_loss) + queue.beta * queue.v * float(bits_spent))


def build_context(
    level: int,
    diag_ws: list[np.ndarray],
    v: float,
    x_hat_prev: np.ndarray | None = None,
    sigma_prev: np.ndarray | None = None,
    x_desired: np.ndarray | None = None,
) -> np.ndarray:
    """Level-specific policy input.

    Level 1 sees the sensors' noise diagonals and the queue; level 2 adds the
    filter belief (estimate and covariance diagonal); level 3 adds the
    reference state.
    """
    parts = [np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in diag_ws]), [v]]
    if level >= 2:
        if x_hat_prev is None or sigma_prev is None:
            raise ValueError("build_context: levels 2 and 3 need the filter belief")
        parts.append(np.diag(np.asarray(sigma_prev)) if np.asarray(sigma_prev).ndim == 2 else np.asarray(sigma_prev))
        parts.append(np.asarray(x_hat_prev, dtype=np.float64))
    if level >= 3:
        if x_desired is None:
            raise ValueError("build_context: level 3 needs the reference state")
        parts.append(np.asarray(x_desired, dtype=np.float64))
    ctx = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
    if not np.all(np.isfinite(ctx)):
        raise ValueError("build_context: non-finite context values")
    return ctx


def context_dim(level: int, n_sensors: int, n_y: int, n_x: int) -> int:
    dim = n_sensors * n_y + 1
    if level >= 2:
        dim += 2 * n_x
    if level >= 3:
        dim += n_x
    return dim


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of a (rows, K) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    cum = np.cumsum(probs, axis=-1)
    cum /= cum[..., -1:]
    u = rng.random(probs.shape[:-1])
    return np.sum(cum < u[..., None], axis=-1).astype(np.int64)


@dataclass(frozen=True)
class PolicyConfig:
    ctx_dim: int
    n_sensors: int
    n_z: tuple[int, ...]
    gru_hidden: int = 256
    dtype: type = np.float64

    def __post_init__(self):
        if len(self.n_z) != self.n_sensors:
            raise ValueError("PolicyConfig: one latent dimension per sensor required")


@dataclass
class ActStep:
    r_bits: np.ndarray
    bits_total: int
    log_prob: float
    value: float
    h_actor: Tensor
    h_critic: Tensor


class _ActorCritic(nn.Module):
    def __init__(self, config: PolicyConfig, rng, prefix: str):
        self.gru = nn.GRUCell(config.ctx_dim, config.gru_hidden, rng, config.dtype,
                              prefix=f"{prefix}.gru")
        out_dim = config.n_sensors * N_RATES if prefix == "actor" else 1
        self.head = nn.Linear(config.gru_hidden, out_dim, rng, config.dtype,
                              prefix=f"{prefix}.head")

    def parameters(self):
        return {**self.gru.parameters(), **self.head.parameters()}


class RatePolicy(nn.Module):
    """Recurrent PPO actor/critic with a frozen old-actor snapshot."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        self.config = config
        self.actor = _ActorCritic(config, rng, "actor")
        self.critic = _ActorCritic(config, rng, "critic")
        self.actor_old = _ActorCritic(config, rng, "actor")
        self.sync_old()

    def parameters(self):
        return {**self.actor.parameters(), **self.critic.parameters()}

    def sync_old(self):
        self.actor_old.load_parameters(self.actor.export_parameters())

    def initial_hidden(self) -> tuple[Tensor, Tensor]:
        return self.actor.gru.initial_state(1), self.critic.gru.initial_state(1)

    def _sensor_slices(self, logits: Tensor):
        for s in range(self.config.n_sensors):
            yield ad.slice_(logits, s * N_RATES, (s + 1) * N_RATES, axis=1)

    def act(
        self,
        ctx: np.ndarray,
        h_actor: Tensor,
        h_critic: Tensor,
        rng: np.random.Generator | None = None,
        deterministic: bool = False,
    ) -> ActStep:
        """One allocation step. Samples a bit width per sensor (argmax in
        deterministic mode, ties resolving to the lowest width) and returns
        the joint log-probability, the critic value, and the advanced
        recurrent states."""
        x = Tensor(np.asarray(ctx, dtype=self.config.dtype).reshape(1, -1))
        if x.shape[1] != self.config.ctx_dim:
            raise ad.ShapeError(f"act: context dim {x.shape[1]} != {self.config.ctx_dim}")
        with ad.no_tape():
            h_a = self.actor.gru(x, h_actor)
            logits = self.actor.head(h_a).data.reshape(self.config.n_sensors, N_RATES)
            h_c = self.critic.gru(x, h_critic)
            value = float(self.critic.head(h_c).data)

        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        if deterministic:
            choice = np.argmax(probs, axis=1)
        else:
            if rng is None:
                raise ValueError("act: stochastic sampling needs an rng")
            choice = sample_categorical(probs, rng)
        log_prob = float(np.sum(np.log(probs[np.arange(self.config.n_sensors), choice])))
        bits = int(sum(int(r) * nz for r, nz in zip(choice, self.config.n_z)))
        return ActStep(choice.astype(np.int64), bits, log_prob, value, h_a, h_c)

    def _joint_log_probs(self, module: _ActorCritic, ctx_seq: np.ndarray, actions: np.ndarray) -> Tensor:
        """Joint log-probabilities of stored actions, shape (E*T,) flattened
        episode-major; differentiable when module is the live actor."""
        n_ep, horizon, _ = ctx_seq.shape
        h = module.gru.initial_state(n_ep)
        per_slot = []
        for t in range(horizon):
            x = Tensor(ctx_seq[:, t].astype(self.config.dtype))
            h = module.gru(x, h)
            logits = module.head(h)
            joint = None
            for s, logit_s in enumerate(self._sensor_slices(logits)):
                m = logit_s.data.max(axis=1, keepdims=True)
                shifted = ad.sub(logit_s, Tensor(np.broadcast_to(m, logit_s.shape).copy()))
                lse = ad.log(ad.sum_(ad.exp(shifted), axis=1))
                onehot = np.zeros((n_ep, N_RATES), dtype=self.config.dtype)
                onehot[np.arange(n_ep), actions[:, t, s]] = 1.0
                chosen = ad.sum_(ad.mul(shifted, Tensor(onehot)), axis=1)
                lp = ad.sub(chosen, lse)
                joint = lp if joint is None else ad.add(joint, lp)
            per_slot.append(ad.reshape(joint, (n_ep, 1)))
        return ad.reshape(ad.concat(per_slot, axis=1), (n_ep * horizon,))

    def sequence_log_probs(self, ctx_seq: np.ndarray, actions: np.ndarray) -> Tensor:
        return self._joint_log_probs(self.actor, ctx_seq, actions)

    def old_log_probs(self, ctx_seq: np.ndarray, actions: np.ndarray) -> np.ndarray:
        with ad.no_tape():
            return self._joint_log_probs(self.actor_old, ctx_seq, actions).data.copy()

    def sequence_values(self, ctx_seq: np.ndarray) -> Tensor:
        n_ep, horizon, _ = ctx_seq.shape
        h = self.critic.gru.initial_state(n_ep)
        per_slot = []
        for t in range(horizon):
            x = Tensor(ctx_seq[:, t].astype(self.config.dtype))
            h = self.critic.gru(x, h)
            per_slot.append(self.critic.head(h))
        return ad.reshape(ad.concat(per_slot, axis=1), (n_ep * horizon,))


def gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation plus discounted-return targets.

    delta_t = r_t + gamma v_{t+1} - v_t (terminal value 0);
    A_t = delta_t + gamma lam A_{t+1}; returns are the discounted suffix
    sums of the raw rewards (the critic's regression target).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"gae: rewards {r.shape} and values {v.shape} differ")
    horizon = r.shape[0]
    adv = np.zeros(horizon)
    ret = np.zeros(horizon)
    acc_a = 0.0
    acc_r = 0.0
    for t in range(horizon - 1, -1, -1):
        v_next = v[t + 1] if t + 1 < horizon else 0.0
        delta = r[t] + gamma * v_next - v[t]
        acc_a = delta + gamma * lam * acc_a
        acc_r = r[t] + gamma * acc_r
        adv[t] = acc_a
        ret[t] = acc_r
    return adv, ret


def normalize_advantages(adv: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), floor)


def ppo_actor_loss(log_probs_new: Tensor, log_probs_old: np.ndarray,
                   advantages: np.ndarray, epsilon: float) -> Tensor:
    """Clipped surrogate: -mean(min(rho A, clip(rho, 1-eps, 1+eps) A))."""
    adv = Tensor(np.asarray(advantages, dtype=log_probs_new.data.dtype))
    old = Tensor(np.asarray(log_probs_old, dtype=log_probs_new.data.dtype))
    rho = ad.exp(ad.sub(log_probs_new, old))
    plain = ad.mul(rho, adv)
    clipped = ad.mul(ad.clip(rho, 1.0 - epsilon, 1.0 + epsilon), adv)
    return ad.scalar_mul(ad.mean_(ad.minimum(plain, clipped)), -1.0)


def critic_loss(values: Tensor, returns: np.ndarray) -> Tensor:
    target = Tensor(np.asarray(returns, dtype=values.data.dtype))
    return ad.mean_(ad.square(ad.sub(values, target)))


@dataclass
class PpoOpts:
    iterations: int = 40
    episodes_per_iter: int = 32
    epochs: int = 30
    sync_every: int = 10
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    grad_clip: float = 1.0


@dataclass
class EpisodeBatch:
    contexts: np.ndarray   # (E, T, ctx)
    actions: np.ndarray    # (E, T, S)
    rewards: np.ndarray    # (E, T)
    values: np.ndarray     # (E, T)


def collect_episode(policy: RatePolicy, env, seed: int, rng: np.random.Generator):
    """Roll one episode with the stochastic policy; returns per-slot arrays."""
    horizon = env.horizon
    ctx = env.reset(seed)
    h_a, h_c = policy.initial_hidden()
    contexts = np.zeros((horizon, policy.config.ctx_dim))
    actions = np.zeros((horizon, policy.config.n_sensors), dtype=np.int64)
    rewards = np.zeros(horizon)
    values = np.zeros(horizon)
    for t in range(horizon):
        contexts[t] = ctx
        step = policy.act(ctx, h_a, h_c, rng=rng)
        h_a, h_c = step.h_actor, step.h_critic
        actions[t] = step.r_bits
        values[t] = step.value
        ctx, rewards[t], _ = env.step(step.r_bits)
    return contexts, actions, rewards, values


def train_rate_policy(
    level: int,
    env,
    opts: PpoOpts,
    rng_init: np.random.Generator,
    rng_episodes: np.random.Generator,
    rng_actions: np.random.Generator,
) -> tuple[RatePolicy, list[dict]]:
    """PPO over the closed-loop environment with frozen codecs.

    Each iteration collects opts.episodes_per_iter episodes, computes GAE,
    then runs opts.epochs optimization epochs over the batch, refreshing the
    old-actor snapshot every opts.sync_every epochs.
    """
    config = PolicyConfig(
        ctx_dim=env.ctx_dim, n_sensors=env.n_sensors, n_z=tuple(env.n_z),
    )
    policy = RatePolicy(config, rng_init)
    opt_actor = nn.Adam(policy.actor.parameters(), lr=opts.lr)
    opt_critic = nn.Adam(policy.critic.parameters(), lr=opts.lr)
    history: list[dict] = []

    for it in range(opts.iterations):
        batches = [
            collect_episode(policy, env, int(rng_episodes.integers(0, 2**31 - 1)), rng_actions)
            for _ in range(opts.episodes_per_iter)
        ]
        batch = EpisodeBatch(
            contexts=np.stack([b[0] for b in batches]),
            actions=np.stack([b[1] for b in batches]),
            rewards=np.stack([b[2] for b in batches]),
            values=np.stack([b[3] for b in batches]),
        )
        adv_list, ret_list = zip(*(
            gae(batch.rewards[i], batch.values[i], opts.gamma, opts.lam)
            for i in range(batch.rewards.shape[0])
        ))
        advantages = normalize_advantages(np.concatenate(adv_list))
        returns = np.concatenate(ret_list)

        log_old = None
        for epoch in range(opts.epochs):
            if epoch % opts.sync_every == 0:
                policy.sync_old()
                log_old = policy.old_log_probs(batch.contexts, batch.actions)
            log_new = policy.sequence_log_probs(batch.contexts, batch.actions)
            loss_a = ppo_actor_loss(log_new, log_old, advantages, opts.clip_eps)
            if not math.isfinite(loss_a.item()):
                raise nn_abort("actor", it, epoch)
            opt_actor.zero_grad()
            ad.backward(loss_a)
            nn.clip_grad_norm(policy.actor.parameters(), opts.grad_clip)
            opt_actor.step()

            values = policy.sequence_values(batch.contexts)
            loss_c = critic_loss(values, returns)
            if not math.isfinite(loss_c.item()):
                raise nn_abort("critic", it, epoch)
            opt_critic.zero_grad()
            ad.backward(loss_c)
            nn.clip_grad_norm(policy.critic.parameters(), opts.grad_clip)
            opt_critic.step()

        history.append({
            "iteration": it,
            "mean_reward": float(batch.rewards.mean()),
            "mean_bits": float(np.sum(batch.actions * np.asarray(env.n_z), axis=-1).mean()),
        })
    return policy, history


def nn_abort(which: str, iteration: int, epoch: int) -> RuntimeError:
    return RuntimeError(f"train_rate_policy: {which} loss non-finite at iteration {iteration}, epoch {epoch}")
