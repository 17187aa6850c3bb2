"""Serialization of codecs and rate policies via the checkpoint container."""

from __future__ import annotations

import numpy as np

from ..codec import Codec, CodecConfig
from ..rate_policy import PolicyConfig, RatePolicy
from ..rng import RngHub
from . import checkpoint


def _dtype_name(dtype) -> str:
    return "f32" if np.dtype(dtype).itemsize == 4 else "f64"


def _dtype_from(name: str):
    return np.float32 if name == "f32" else np.float64


def save_codec(path, codec: Codec, level: int, seed: int, train_steps: int):
    cfg = codec.config
    meta = {
        "kind": "codec",
        "level": int(level),
        "variant": cfg.variant,
        "n_y": cfg.n_y,
        "n_z": cfg.n_z,
        "mlp_hidden": list(cfg.mlp_hidden),
        "gru_hidden": cfg.gru_hidden,
        "dtype": _dtype_name(cfg.dtype),
        "seed": int(seed),
        "train_steps": int(train_steps),
    }
    checkpoint.save_checkpoint(path, meta, codec.export_parameters())


def load_codec(path, expect: dict | None = None) -> tuple[Codec, dict]:
    meta, tensors = checkpoint.load_checkpoint(path, expect={"kind": "codec", **(expect or {})})
    cfg = CodecConfig(
        n_y=int(meta["n_y"]),
        n_z=int(meta["n_z"]),
        variant=meta["variant"],
        mlp_hidden=tuple(meta["mlp_hidden"]),
        gru_hidden=int(meta["gru_hidden"]),
        dtype=_dtype_from(meta["dtype"]),
    )
    codec = Codec(cfg, RngHub(0).stream("codec-load"))
    codec.load_parameters(tensors)
    return codec, meta


def save_policy(path, policy: RatePolicy, level: int, budget: float, seed: int, train_steps: int):
    cfg = policy.config
    meta = {
        "kind": "rate-policy",
        "level": int(level),
        "budget": float(budget),
        "ctx_dim": cfg.ctx_dim,
        "n_sensors": cfg.n_sensors,
        "n_z": list(cfg.n_z),
        "gru_hidden": cfg.gru_hidden,
        "dtype": _dtype_name(cfg.dtype),
        "seed": int(seed),
        "train_steps": int(train_steps),
    }
    checkpoint.save_checkpoint(path, meta, policy.export_parameters())


def load_policy(path, expect: dict | None = None) -> tuple[RatePolicy, dict]:
    meta, tensors = checkpoint.load_checkpoint(path, expect={"kind": "rate-policy", **(expect or {})})
    cfg = PolicyConfig(
        ctx_dim=int(meta["ctx_dim"]),
        n_sensors=int(meta["n_sensors"]),
        n_z=tuple(int(z) for z in meta["n_z"]),
        gru_hidden=int(meta["gru_hidden"]),
        dtype=_dtype_from(meta["dtype"]),
    )
    policy = RatePolicy(cfg, RngHub(0).stream("policy-load"))
    policy.load_parameters(tensors)
    policy.sync_old()
    return policy, meta
