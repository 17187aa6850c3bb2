"""Budget sweeps and allocation tables (the figure/table analogs)."""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import ExperimentConfig
from .simulate import build_models, run_episode

SWEEP_COLUMNS = ["budget", "mode", "level", "metric", "median", "iqr", "n_seeds", "n_diverged"]
ALLOCATION_COLUMNS = ["level", "sensor", "window", "states", "mean_bits"]
METRICS = ("recon_err", "est_err", "lqr_cost")


def _episode_summaries(config: ExperimentConfig):
    models = build_models(config)
    out = []
    for seed in config.seeds:
        record, _ = run_episode(config, models, seed)
        out.append(record)
    return out


def sweep_budgets(
    config: ExperimentConfig,
    budgets: list[float],
    modes: list[str],
    policy_paths: dict[float, str] | None = None,
) -> list[dict]:
    """Evaluate modes across budgets x seeds; one row per (budget, mode,
    metric) holding the median and interquartile range over seeds.

    Learned mode needs one policy checkpoint per budget (policy_paths).
    """
    rows = []
    for budget in budgets:
        for mode in modes:
            cfg = dataclasses.replace(config, rate_mode=mode, budget=float(budget))
            if mode == "learned":
                if not policy_paths or budget not in policy_paths:
                    raise ValueError(f"sweep_budgets: no policy checkpoint for budget {budget}")
                cfg = dataclasses.replace(cfg, policy_checkpoint=policy_paths[budget])
            records = _episode_summaries(cfg)
            values = {
                "recon_err": [r.recon_err.mean() for r in records],
                "est_err": [r.est_err.mean() for r in records],
                "lqr_cost": [r.stage_cost.mean() for r in records],
            }
            n_diverged = sum(r.diverged for r in records)
            for metric in METRICS:
                data = np.asarray(values[metric])
                q25, q50, q75 = np.percentile(data, [25, 50, 75])
                rows.append({
                    "budget": float(budget),
                    "mode": mode,
                    "level": config.level,
                    "metric": metric,
                    "median": float(q50),
                    "iqr": float(q75 - q25),
                    "n_seeds": len(records),
                    "n_diverged": n_diverged,
                })
    return rows


def allocation_report(config: ExperimentConfig) -> list[dict]:
    """Mean bits per (sensor, schedule window), averaged over seeds."""
    spec = config.spec
    bounds = spec.window_bounds(config.resolved_horizon())
    if not bounds:
        raise ValueError("allocation_report: scenario has no schedule windows")
    records = _episode_summaries(config)
    rows = []
    for w, (start, stop) in enumerate(bounds):
        states = "/".join(s[0] for s in spec.window_states[w])
        for sensor in range(spec.n_sensors):
            per_seed = [r.bits[start - 1 : stop - 1, sensor].mean() for r in records]
            rows.append({
                "level": config.level,
                "sensor": sensor + 1,
                "window": w + 1,
                "states": states,
                "mean_bits": float(np.mean(per_seed)),
            })
    return rows
