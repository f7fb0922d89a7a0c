"""End-to-end runs: batch, returns, envelope, selection, cloning, scoring.

Every stage draws randomness from a stream derived from ``(seed, stage
name)``, so skipping or reordering stages never perturbs the others. A run
directory holds::

    config.json                    resolved RunConfig
    curves_<algorithm>.csv         seed, epoch, mean_return, std_return
    summary.json                   per-seed FinalScores, aggregates, winners
    checkpoints/                   envelopes and policies per seed
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from bail.dataset import (
    Batch,
    BatchFileError,
    batch_statistics,
    compute_augmented_returns,
    compute_returns,
    load_batch,
    save_batch,
    split_train_validation,
)
from bail.envelope import EnvelopeConfig, save_envelope, train_upper_envelope
from bail.envs import (
    EnvSpec,
    derive_rng,
    derive_seed,
    generate_execution_batch,
    generate_oracle_batch,
    generate_training_batch,
    make_env,
    scripted_controller,
)
from bail.imitation import (
    PolicyConfig,
    bail_select,
    save_policy,
    train_bc_all,
    train_policy_bc,
    train_progressive_bail,
    train_regression_value_and_select,
)
from bail.selection import select_top_returns

log = logging.getLogger(__name__)

ALGORITHMS = ("bail", "progressive_bail", "bc", "top_g", "regression_value")
DEFAULT_SUITE = ["bail", "bc", "top_g", "regression_value"]
WINNER_MARGIN = 0.10
LAST_N_EVALS = 10


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRecord:
    epoch: float
    returns: np.ndarray
    mean: float
    std: float
    faults: int = 0


def evaluate_policy(env: EnvSpec, policy, n_episodes: int = 10, seed: int = 0,
                    epoch: float = 0.0) -> EvalRecord:
    """Undiscounted returns of ``n_episodes`` test episodes, stepped together.

    Initial states come from ``derive_rng(seed, "eval")``. An episode whose
    action, state or reward goes non-finite (or whose policy raises) stops
    and scores exactly 0.
    """
    rng = derive_rng(seed, "eval")
    s = env.initial_state_sampler(rng, n_episodes).astype(np.float64)
    totals = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    faulted = np.zeros(n_episodes, dtype=bool)
    for _ in range(env.time_cap):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        try:
            a = np.asarray(policy(s[rows]), dtype=np.float64).reshape(rows.size, env.action_dim)
        except Exception as exc:  # a crashing policy is one more environment fault
            log.warning("policy raised during evaluation: %s", exc)
            faulted[rows] = True
            alive[rows] = False
            break
        a = env.clip(a)
        nxt, r, done = env.step(s[rows], a)
        bad = ~(np.all(np.isfinite(a), axis=1) & np.all(np.isfinite(nxt), axis=1) & np.isfinite(r))
        ok = ~bad
        totals[rows[ok]] += r[ok]
        s[rows[ok]] = nxt[ok]
        faulted[rows[bad]] = True
        alive[rows[bad]] = False
        alive[rows[ok & done]] = False
    if faulted.any():
        log.warning("evaluation: %d of %d episodes faulted and score 0", int(faulted.sum()), n_episodes)
    totals[faulted] = 0.0
    return EvalRecord(float(epoch), totals, float(totals.mean()), float(totals.std()), int(faulted.sum()))


@dataclass
class FinalScore:
    per_seed: dict
    mean: float
    std: float


def seed_score(records) -> float:
    """Mean over the last ten evaluation points of their mean returns."""
    if not records:
        raise ValueError("no evaluation records")
    return float(np.mean([r.mean for r in records[-LAST_N_EVALS:]]))


def final_score(per_seed: dict) -> FinalScore:
    vals = np.array(list(per_seed.values()), dtype=np.float64)
    return FinalScore(dict(per_seed), float(vals.mean()), float(vals.std()))


def winners(scores: dict, margin: float = WINNER_MARGIN) -> list:
    """Labels whose mean lies within ``margin`` of the best.

    "Within 10%" is measured against ``|best|`` so it stays meaningful for
    negative returns: ``score >= best - margin * |best|``.
    """
    if not scores:
        raise ValueError("no scores")
    best = max(scores.values())
    cut = best - margin * abs(best)
    return [k for k, v in scores.items() if v >= cut]


def relative_gap(a: float, b: float) -> float:
    """``|a - b| / |b|``: how far ``a`` sits from reference ``b``."""
    return abs(a - b) / abs(b) if b != 0 else (0.0 if a == b else math.inf)


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    name: str = "run"
    env: str = "point_reach"
    time_cap: int = 150
    gamma: float = 0.95
    batch_source: str = "generate"
    batch_path: str | None = None
    batch_kind: str = "training"
    batch_m: int = 30000
    batch_sigma: float = 0.5
    batch_seed: int | None = 0
    behavior_policy: str = "mediocre"
    returns_kind: str = "augmented"
    algorithms: list = field(default_factory=lambda: list(DEFAULT_SUITE))
    envelope: dict = field(default_factory=dict)
    policy: dict = field(default_factory=lambda: {"hidden_sizes": [64, 64]})
    p_bail: float = 30.0
    p_progressive: float = 25.0
    selection_rule: str = "auto"
    eval_interval: float = 0.5
    eval_episodes: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"
    workers: int = 1
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.eval_interval <= 0:
            raise ConfigError("eval_interval must be > 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.env not in ("point_reach", "hill_climb"):
            raise ConfigError(f"unknown env {self.env!r}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        if self.batch_source not in ("generate", "file"):
            raise ConfigError("batch_source must be 'generate' or 'file'")
        if self.batch_source == "file" and not self.batch_path:
            raise ConfigError("batch_source 'file' needs batch_path")
        if self.batch_kind not in ("training", "execution", "oracle"):
            raise ConfigError(f"unknown batch_kind {self.batch_kind!r}")
        if self.returns_kind not in ("plain", "augmented", "oracle"):
            raise ConfigError(f"unknown returns_kind {self.returns_kind!r}")
        if self.returns_kind == "oracle" and not (
                self.batch_source == "generate" and self.batch_kind == "oracle"):
            raise ConfigError("oracle returns need a generated oracle batch")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        try:
            EnvelopeConfig(**self.envelope)
            PolicyConfig(**self.policy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad sub-config: {exc}") from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path, **overrides) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        d.update(overrides)
        return cls.from_dict(d)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get("BAIL_OUT") or self.output_dir)


def _stage_seed(seed, *labels) -> int:
    return int(derive_seed(seed, *labels).generate_state(1)[0])


# --------------------------------------------------------------------------
# pipeline


def acquire_batch(cfg: RunConfig, seed: int):
    """Batch plus, for oracle batches, the oracle returns table."""
    env = make_env(cfg.env, cfg.time_cap)
    if cfg.batch_source == "file":
        return load_batch(cfg.batch_path), None
    bseed = cfg.batch_seed if cfg.batch_seed is not None else _stage_seed(seed, "batch")
    if cfg.batch_kind == "training":
        return generate_training_batch(env, cfg.batch_m, cfg.batch_sigma, bseed), None
    if cfg.batch_kind == "execution":
        return generate_execution_batch(env, cfg.batch_m, cfg.behavior_policy, cfg.batch_sigma, bseed), None
    return generate_oracle_batch(env, cfg.batch_m, cfg.batch_sigma, bseed, cfg.gamma)


def batch_returns(cfg: RunConfig, batch: Batch, oracle=None):
    if cfg.returns_kind == "plain":
        return compute_returns(batch, cfg.gamma)
    if cfg.returns_kind == "augmented":
        return compute_augmented_returns(batch, cfg.gamma, batch.metadata.get("time_cap", cfg.time_cap))
    return oracle


def _run_seed(cfg: RunConfig, seed: int, batch: Batch, returns, ckpt_dir: Path | None):
    """All algorithms for one training seed; returns ``{alg: [EvalRecord, ...]}``."""
    env = make_env(cfg.env, cfg.time_cap)
    split = split_train_validation(batch, 0.8, _stage_seed(seed, "split"))
    env_cfg = EnvelopeConfig(**{**cfg.envelope, "seed": _stage_seed(seed, "envelope")})
    pol_cfg = PolicyConfig(**{**cfg.policy, "seed": _stage_seed(seed, "policy")})
    eval_base = _stage_seed(seed, "eval")
    out = {}

    for alg in cfg.algorithms:
        records = []

        def on_eval(epoch, policy, records=records):
            k = len(records)
            records.append(evaluate_policy(env, policy, cfg.eval_episodes,
                                           _stage_seed(eval_base, k), epoch))

        kw = dict(on_eval=on_eval, eval_interval=cfg.eval_interval,
                  action_low=env.action_low, action_high=env.action_high)
        if alg == "bail":
            envelope, trace = train_upper_envelope(batch, returns, split, env_cfg)
            chosen = bail_select(batch, returns, envelope, cfg.p_bail, cfg.selection_rule)
            policy = train_policy_bc(batch, chosen.indices, pol_cfg, **kw)
            if ckpt_dir is not None:
                save_envelope(envelope, ckpt_dir / f"seed{seed}_envelope.bin")
                trace.to_csv(ckpt_dir / f"seed{seed}_envelope_trace.csv")
        elif alg == "progressive_bail":
            rule = "ratio" if cfg.selection_rule in ("auto", "ratio") else cfg.selection_rule
            policy, envelope = train_progressive_bail(batch, returns, split, env_cfg, pol_cfg,
                                                      cfg.p_progressive, rule=rule, **kw)
        elif alg == "bc":
            policy = train_bc_all(batch, pol_cfg, **kw)
        elif alg == "top_g":
            chosen = select_top_returns(returns.returns, cfg.p_bail)
            policy = train_policy_bc(batch, chosen.indices, pol_cfg, **kw)
        else:
            chosen = train_regression_value_and_select(batch, returns, split, env_cfg, cfg.p_bail,
                                                       cfg.selection_rule)
            policy = train_policy_bc(batch, chosen.indices, pol_cfg, **kw)
        if ckpt_dir is not None:
            save_policy(policy, ckpt_dir / f"seed{seed}_{alg}_policy.bin")
        out[alg] = records
    return out


def _seed_job(args):
    cfg, seed, ckpt_dir = args
    batch, oracle = acquire_batch(cfg, seed)
    returns = batch_returns(cfg, batch, oracle)
    return _run_seed(cfg, seed, batch, returns, ckpt_dir), batch_statistics(batch).mean_return


def behavior_score(cfg: RunConfig, seed: int, n_points: int) -> float | None:
    """The execution-batch behavior policy scored under the same eval protocol."""
    if cfg.batch_kind != "execution" or cfg.batch_source != "generate":
        return None
    env = make_env(cfg.env, cfg.time_cap)
    base = scripted_controller(env, cfg.behavior_policy)
    eval_base = _stage_seed(seed, "eval")
    ks = range(max(0, n_points - LAST_N_EVALS), n_points)
    recs = [evaluate_policy(env, base, cfg.eval_episodes, _stage_seed(eval_base, k)) for k in ks]
    return seed_score(recs) if recs else None


def run_pipeline(cfg: RunConfig) -> Path:
    """Run every algorithm for every seed and write the run directory."""
    run_dir = cfg.resolved_output_dir() / cfg.name
    ckpt_dir = run_dir / "checkpoints" if cfg.save_checkpoints else None
    (ckpt_dir or run_dir).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))

    shared = None
    if cfg.batch_source == "file" or cfg.batch_seed is not None:
        batch, oracle = acquire_batch(cfg, cfg.seeds[0])
        shared = (batch, batch_returns(cfg, batch, oracle))

    results, errors, batch_means = {}, {}, {}
    jobs = [(cfg, s, ckpt_dir) for s in cfg.seeds]

    def collect(seed, fn):
        try:
            results[seed], batch_means[seed] = fn()
        except Exception as exc:  # one bad seed must not sink the others
            log.error("seed %s failed: %s", seed, exc)
            errors[seed] = f"{type(exc).__name__}: {exc}"

    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            if shared is not None:
                futs = {s: pool.submit(_run_seed, cfg, s, shared[0], shared[1], ckpt_dir) for s in cfg.seeds}
            else:
                futs = {s: pool.submit(_seed_job, j) for s, j in zip(cfg.seeds, jobs)}
            for s, f in futs.items():
                if shared is not None:
                    collect(s, lambda f=f: (f.result(), batch_statistics(shared[0]).mean_return))
                else:
                    collect(s, f.result)
    else:
        for job in jobs:
            s = job[1]
            if shared is not None:
                collect(s, lambda s=s: (_run_seed(cfg, s, shared[0], shared[1], ckpt_dir),
                                        batch_statistics(shared[0]).mean_return))
            else:
                collect(s, lambda job=job: _seed_job(job))

    if not results:
        (run_dir / "summary.json").write_text(json.dumps({"errors": errors}, indent=2))
        raise PipelineError(f"all seeds failed: {errors}")

    summary = {"config": asdict(cfg), "algorithms": {}, "errors": {str(k): v for k, v in errors.items()}}
    done_seeds = [s for s in cfg.seeds if s in results]
    for alg in cfg.algorithms:
        with open(run_dir / f"curves_{alg}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "epoch", "mean_return", "std_return"])
            for s in done_seeds:
                for rec in results[s][alg]:
                    w.writerow([s, repr(rec.epoch), repr(rec.mean), repr(rec.std)])
        per_seed = {str(s): seed_score(results[s][alg]) for s in done_seeds}
        fs = final_score(per_seed)
        summary["algorithms"][alg] = {"per_seed": fs.per_seed, "mean": fs.mean, "std": fs.std,
                                      "n_evals": len(results[done_seeds[0]][alg])}
    means = {alg: v["mean"] for alg, v in summary["algorithms"].items()}
    summary["winners"] = winners(means)
    summary["batch_mean_return"] = {str(s): batch_means[s] for s in done_seeds}
    n_points = summary["algorithms"][cfg.algorithms[0]]["n_evals"]
    beh = {str(s): behavior_score(cfg, s, n_points) for s in done_seeds}
    if any(v is not None for v in beh.values()):
        summary["behavior_score"] = beh
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return run_dir


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"no readable summary in {run_dir}: {exc}") from exc


@dataclass
class ComparisonRow:
    label: str
    mean: float
    std: float
    winner: bool


def compare_runs(run_dirs) -> list:
    """Every (run, algorithm) score, with winners marked per the 10% rule."""
    run_dirs = list(run_dirs)
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    entries = {}
    for rd in run_dirs:
        summ = load_summary(rd)
        algs = summ.get("algorithms") or {}
        if not algs:
            raise ConfigError(f"{rd}: no final scores")
        for alg, v in algs.items():
            if v.get("mean") is None:
                raise ConfigError(f"{rd}: missing score for {alg}")
            entries[f"{Path(rd).name}/{alg}"] = (float(v["mean"]), float(v.get("std", 0.0)))
    win = set(winners({k: m for k, (m, _) in entries.items()}))
    return [ComparisonRow(k, m, s, k in win) for k, (m, s) in entries.items()]


def save_generated_batch(cfg: RunConfig, seed: int, path) -> Batch:
    batch, _ = acquire_batch(cfg, seed)
    save_batch(batch, path)
    return batch


__all__ = [
    "ALGORITHMS", "BatchFileError", "ComparisonRow", "ConfigError", "EvalRecord", "FinalScore",
    "PipelineError", "RunConfig", "compare_runs", "evaluate_policy", "final_score", "relative_gap",
    "run_pipeline", "seed_score", "winners",
]
