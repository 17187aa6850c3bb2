"""Small neural-network toolkit on top of the autodiff tape.

Layers keep their parameters in an ordered dict of named tensors so that
checkpointing, optimizer state and gradient maps all key off stable names.
Initialization draws from an explicit generator, never global state.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _uniform_init(rng, shape, bound, dtype):
    return parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class Module:
    """Base: exposes named parameters as a flat dict."""

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()

    def export_parameters(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float64, prefix="linear"):
        bound = math.sqrt(1.0 / n_in)
        self.w = _uniform_init(rng, (n_in, n_out), bound, dtype)
        self.b = _uniform_init(rng, (n_out,), bound, dtype)
        self.prefix = prefix

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_rowvec(ad.matmul(x, self.w), self.b)

    def parameters(self):
        return {f"{self.prefix}.w": self.w, f"{self.prefix}.b": self.b}


class MLP(Module):
    """Stack of Linear layers with relu between them; last layer optionally
    linear (``activate_last=False``) or relu like the hidden ones."""

    def __init__(self, dims, rng, dtype=np.float64, prefix="mlp", activate_last=True):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, dtype, prefix=f"{prefix}.{i}")
            for i in range(len(dims) - 1)
        ]
        self.activate_last = activate_last

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = ad.relu(x)
        return x

    def parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


class GRUCell(Module):
    """Standard gated recurrent unit.

    r = sigma(x W_ir + b_ir + h W_hr + b_hr)
    z = sigma(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = (1 - z) * n + z * h
    """

    GATES = ("r", "z", "n")

    def __init__(self, n_in, n_hidden, rng, dtype=np.float64, prefix="gru"):
        self.n_hidden = n_hidden
        self.dtype = dtype
        self.prefix = prefix
        bound = math.sqrt(1.0 / n_hidden)
        self.w = {g: _uniform_init(rng, (n_in, n_hidden), bound, dtype) for g in self.GATES}
        self.u = {g: _uniform_init(rng, (n_hidden, n_hidden), bound, dtype) for g in self.GATES}
        self.bi = {g: _uniform_init(rng, (n_hidden,), bound, dtype) for g in self.GATES}
        self.bh = {g: _uniform_init(rng, (n_hidden,), bound, dtype) for g in self.GATES}

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.n_hidden), dtype=self.dtype))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        def gate(g):
            return ad.add(
                ad.add_rowvec(ad.matmul(x, self.w[g]), self.bi[g]),
                ad.add_rowvec(ad.matmul(h, self.u[g]), self.bh[g]),
            )

        r = ad.sigmoid(gate("r"))
        z = ad.sigmoid(gate("z"))
        hn = ad.add_rowvec(ad.matmul(h, self.u["n"]), self.bh["n"])
        n = ad.tanh(ad.add(ad.add_rowvec(ad.matmul(x, self.w["n"]), self.bi["n"]), ad.mul(r, hn)))
        one = Tensor(np.ones_like(z.data))
        return ad.add(ad.mul(ad.sub(one, z), n), ad.mul(z, h))

    def parameters(self):
        out = {}
        for g in self.GATES:
            out[f"{self.prefix}.w_{g}"] = self.w[g]
            out[f"{self.prefix}.u_{g}"] = self.u[g]
            out[f"{self.prefix}.bi_{g}"] = self.bi[g]
            out[f"{self.prefix}.bh_{g}"] = self.bh[g]
        return out


def softplus(x: Tensor) -> Tensor:
    """Numerically stable log(1 + exp(x)) = relu(x) + log(1 + exp(-|x|))."""
    neg_abs = ad.minimum(x, ad.scalar_mul(x, -1.0))
    one = Tensor(np.ones_like(x.data))
    return ad.add(ad.relu(x), ad.log(ad.add(one, ad.exp(neg_abs))))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Adam with optional plateau-halving of the step size."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            m_hat = self.m[k] / b1t
            v_hat = self.v[k] / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class PlateauHalver:
    """Halve the optimizer lr when the smoothed loss stops improving.

    Raw per-step losses are noisy (fresh minibatch every step), so the
    plateau test runs on a short moving average.
    """

    def __init__(self, optimizer: Adam, patience=80, min_lr=1e-5, rel_improve=1e-4,
                 smooth_window=25):
        self.opt = optimizer
        self.patience = patience
        self.min_lr = min_lr
        self.rel_improve = rel_improve
        self.smooth_window = smooth_window
        self.best = math.inf
        self.stale = 0
        self._recent: list[float] = []

    def update(self, loss: float):
        self._recent.append(loss)
        if len(self._recent) < self.smooth_window:
            return
        smoothed = sum(self._recent[-self.smooth_window :]) / self.smooth_window
        if smoothed < self.best * (1.0 - self.rel_improve):
            self.best = smoothed
            self.stale = 0
            return
        self.stale += 1
        if self.stale >= self.patience and self.opt.lr > self.min_lr:
            self.opt.lr = max(self.opt.lr * 0.5, self.min_lr)
            self.stale = 0
