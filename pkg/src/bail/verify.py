"""Numerical checks of the envelope's limiting behavior and the return heuristic.

Four checks, each reported with its measured value and threshold:

* interpolation: with no weight penalty a wide ReLU net drives the penalty
  loss on a small dataset to (near) zero;
* large weight penalty: the envelope flattens to the largest return;
* penalty coefficient: total constraint violation shrinks as K grows;
* augmentation: augmented returns track long-rollout returns.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from bail.envelope import (
    EnvelopeConfig,
    _fit_all,
    envelope_value,
    penalty_k_sweep,
    train_with_l2_sweep,
)
from bail.dataset import compute_augmented_returns
from bail.envs import derive_rng, generate_oracle_batch, make_env
from bail.numcore import penalty_loss


@dataclass
class VerifyConfig:
    seed: int = 0
    hidden_sizes: list = field(default_factory=lambda: [128, 128])
    interp_points: int = 20
    interp_epochs: int = 10000
    interp_learning_rate: float = 3e-4
    interp_threshold: float = 1e-3
    l2_points: int = 50
    lambdas: list = field(default_factory=lambda: [0.0, 1e6])
    l2_epochs: int = 5000
    l2_threshold: float = 0.05
    k_states: int = 50
    k_repeats: int = 4
    ks: list = field(default_factory=lambda: [10.0, 100.0, 1000.0])
    k_epochs: int = 1000
    k_tolerance: float = 0.10
    oracle_env: str = "hill_climb"
    oracle_time_cap: int = 150
    oracle_m: int = 15000
    oracle_sigma: float = 0.5
    gamma: float = 0.95
    correlation_threshold: float = 0.95


def _target(states):
    return np.sin(3.0 * states[:, 0]) + states[:, 1] ** 2


def check_interpolation(cfg: VerifyConfig) -> dict:
    rng = derive_rng(cfg.seed, "verify", "interp")
    s = rng.uniform(-1, 1, size=(cfg.interp_points, 2))
    g = _target(s)
    ec = EnvelopeConfig(hidden_sizes=cfg.hidden_sizes, learning_rate=cfg.interp_learning_rate,
                        lam=0.0, minibatch_size=cfg.interp_points, max_epochs=cfg.interp_epochs,
                        early_stopping=False, seed=cfg.seed)
    env, _ = _fit_all(s, g, ec)
    rep, _ = penalty_loss(envelope_value(env, s), g, ec.K)
    return {"name": "interpolation", "measured": rep.total, "threshold": cfg.interp_threshold,
            "passed": bool(rep.total < cfg.interp_threshold)}


def check_l2_limit(cfg: VerifyConfig) -> dict:
    rng = derive_rng(cfg.seed, "verify", "l2")
    s = rng.uniform(-1, 1, size=(cfg.l2_points, 2))
    g = _target(s)
    ec = EnvelopeConfig(hidden_sizes=cfg.hidden_sizes, minibatch_size=cfg.l2_points,
                        max_epochs=cfg.l2_epochs, early_stopping=False, seed=cfg.seed)
    sweep = train_with_l2_sweep(s, g, sorted(cfg.lambdas), ec)
    span = float(g.max() - g.min())
    rows = []
    for lam, env in sweep:
        v = envelope_value(env, s)
        rows.append({"lambda": lam, "max_gap_to_max_return": float(np.max(np.abs(v - g.max()))) / span,
                     "spread": float(v.max() - v.min())})
    largest = rows[-1]
    passed = largest["max_gap_to_max_return"] < cfg.l2_threshold
    if len(rows) > 1:
        passed = passed and largest["spread"] < rows[0]["spread"]
    return {"name": "l2_limit", "measured": largest["max_gap_to_max_return"],
            "threshold": cfg.l2_threshold, "passed": bool(passed), "sweep": rows}


def k_sweep_data(cfg: VerifyConfig):
    """Repeated states with scattered returns, so no envelope can interpolate."""
    rng = derive_rng(cfg.seed, "verify", "k")
    base = rng.uniform(-1, 1, size=(cfg.k_states, 2))
    s = np.repeat(base, cfg.k_repeats, axis=0)
    g = _target(s) + rng.normal(0.0, 0.3, size=len(s))
    return s, g


def check_k_trend(cfg: VerifyConfig) -> dict:
    s, g = k_sweep_data(cfg)
    ec = EnvelopeConfig(hidden_sizes=cfg.hidden_sizes, minibatch_size=len(s),
                        max_epochs=cfg.k_epochs, early_stopping=False, seed=cfg.seed)
    sweep = penalty_k_sweep(s, g, sorted(cfg.ks), ec)
    viol = [v for _, v in sweep]
    ratios = [viol[i + 1] / viol[i] if viol[i] > 0 else (0.0 if viol[i + 1] == 0 else np.inf)
              for i in range(len(viol) - 1)]
    worst = max(ratios) if ratios else 0.0
    return {"name": "k_trend", "measured": worst, "threshold": 1.0 + cfg.k_tolerance,
            "passed": bool(worst <= 1.0 + cfg.k_tolerance),
            "sweep": [{"K": k, "violation": v} for k, v in sweep]}


def check_augmentation(cfg: VerifyConfig) -> dict:
    env = make_env(cfg.oracle_env, cfg.oracle_time_cap)
    batch, oracle = generate_oracle_batch(env, cfg.oracle_m, cfg.oracle_sigma, cfg.seed, cfg.gamma)
    aug = compute_augmented_returns(batch, cfg.gamma)
    r = float(np.corrcoef(aug.returns, oracle.returns)[0, 1])
    return {"name": "augmentation_oracle_correlation", "measured": r,
            "threshold": cfg.correlation_threshold, "passed": bool(r > cfg.correlation_threshold)}


CHECKS = (check_interpolation, check_l2_limit, check_k_trend, check_augmentation)


def verify_theorems(cfg: VerifyConfig | None = None) -> dict:
    cfg = cfg or VerifyConfig()
    checks = [fn(cfg) for fn in CHECKS]
    return {"config": asdict(cfg), "checks": checks, "passed": all(c["passed"] for c in checks)}
