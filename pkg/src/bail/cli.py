"""Command-line entry point: ``bail <subcommand> ...``.

Exit codes: 0 success, 1 failed verification checks, 2 configuration
error, 3 data-format error, 4 training fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from bail.dataset import (
    BatchError,
    BatchFileError,
    batch_statistics,
    compute_augmented_returns,
    compute_returns,
    load_batch,
    save_batch,
    split_train_validation,
)
from bail.envelope import CheckpointError as EnvelopeCheckpointError
from bail.envelope import (
    EnvelopeConfig,
    EnvelopeTrainingError,
    load_envelope,
    save_envelope,
    train_upper_envelope,
)
from bail.envs import (
    RolloutError,
    generate_execution_batch,
    generate_oracle_batch,
    generate_training_batch,
    make_env,
    scripted_controller,
)
from bail.harness import (
    ConfigError,
    PipelineError,
    RunConfig,
    compare_runs,
    evaluate_policy,
    run_pipeline,
)
from bail.imitation import CheckpointError as PolicyCheckpointError
from bail.imitation import PolicyConfig, bail_select, load_policy, save_policy, train_policy_bc
from bail.numcore import NonFiniteError
from bail.selection import NonPositiveEnvelope, select_top_returns
from bail.verify import VerifyConfig, verify_theorems

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3, 4


def _returns_for(batch, kind, gamma):
    if kind == "plain":
        return compute_returns(batch, gamma)
    return compute_augmented_returns(batch, gamma)


def _hidden(text):
    return [int(x) for x in text.split(",") if x]


def cmd_gen_batch(args):
    env = make_env(args.env, args.time_cap)
    if args.kind == "training":
        batch = generate_training_batch(env, args.m, args.sigma, args.seed)
        oracle = None
    elif args.kind == "execution":
        batch = generate_execution_batch(env, args.m, args.policy, args.sigma, args.seed)
        oracle = None
    else:
        batch, oracle = generate_oracle_batch(env, args.m, args.sigma, args.seed, args.gamma)
    save_batch(batch, args.out)
    if args.returns_csv:
        table = oracle if oracle is not None else compute_augmented_returns(batch, args.gamma)
        table.to_csv(args.returns_csv, batch)
    st = batch_statistics(batch)
    print(json.dumps({"path": str(args.out), "m": len(batch), "episodes": st.episode_count,
                      "mean_return": st.mean_return, "std_return": st.std_return}))


def cmd_train_envelope(args):
    batch = load_batch(args.batch)
    returns = _returns_for(batch, args.returns, args.gamma)
    cfg = EnvelopeConfig(hidden_sizes=_hidden(args.hidden), learning_rate=args.lr, K=args.K,
                         lam=args.lam, minibatch_size=args.minibatch, max_epochs=args.epochs,
                         patience=args.patience, seed=args.seed)
    split = split_train_validation(batch, 0.8, args.seed)
    envelope, trace = train_upper_envelope(batch, returns, split, cfg)
    save_envelope(envelope, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    print(json.dumps({"path": str(args.out), "best_val_loss": min(v for _, v in envelope.validation_history),
                      "resets": trace.resets}))


def cmd_select(args):
    batch = load_batch(args.batch)
    returns = _returns_for(batch, args.returns, args.gamma)
    if args.rule == "top_g":
        result = select_top_returns(returns.returns, args.p)
    else:
        if not args.envelope:
            raise ConfigError("--envelope is required for ratio/difference selection")
        result = bail_select(batch, returns, load_envelope(args.envelope), args.p, args.rule)
    result.to_csv(args.out)
    print(json.dumps({"path": str(args.out), "selected": len(result), "rule": result.rule,
                      "x": result.threshold_x}))


def _read_selection(path):
    import csv
    with open(path, newline="") as fh:
        return np.array([int(r["index"]) for r in csv.DictReader(fh) if r["selected"] == "1"])


def cmd_clone(args):
    batch = load_batch(args.batch)
    idx = _read_selection(args.selection) if args.selection else np.arange(len(batch))
    cfg = PolicyConfig(hidden_sizes=_hidden(args.hidden), learning_rate=args.lr,
                       minibatch_size=args.minibatch, epochs=args.epochs, seed=args.seed)
    policy = train_policy_bc(batch, idx, cfg)
    save_policy(policy, args.out)
    print(json.dumps({"path": str(args.out), "trained_on": int(len(idx))}))


def _run_config(args, **forced):
    over = {}
    for key in ("name", "env", "time_cap", "gamma", "batch_path", "batch_kind", "batch_m",
                "batch_sigma", "batch_seed", "behavior_policy", "returns_kind", "selection_rule",
                "eval_interval", "eval_episodes", "output_dir", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "batch_path", None):
        over["batch_source"] = "file"
    if getattr(args, "algorithms", None):
        over["algorithms"] = args.algorithms.split(",")
    if getattr(args, "seeds", None):
        over["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "policy_hidden", None):
        over["policy"] = {"hidden_sizes": _hidden(args.policy_hidden)}
    epochs = {}
    if getattr(args, "envelope_epochs", None):
        epochs["max_epochs"] = args.envelope_epochs
    over.update(forced)
    if args.config:
        cfg = RunConfig.from_json(args.config, **over)
    else:
        cfg = RunConfig.from_dict(over)
    if epochs:
        cfg = RunConfig.from_dict({**asdict(cfg), "envelope": {**cfg.envelope, **epochs}})
    if getattr(args, "policy_epochs", None):
        cfg = RunConfig.from_dict({**asdict(cfg), "policy": {**cfg.policy, "epochs": args.policy_epochs}})
    return cfg


def cmd_run(args, **forced):
    cfg = _run_config(args, **forced)
    run_dir = run_pipeline(cfg)
    summary = json.loads((run_dir / "summary.json").read_text())
    print(json.dumps({"run_dir": str(run_dir), "winners": summary["winners"],
                      "scores": {a: v["mean"] for a, v in summary["algorithms"].items()}}))


def cmd_progressive(args):
    cmd_run(args, algorithms=["progressive_bail"])


def cmd_verify(args):
    cfg = VerifyConfig(**json.loads(Path(args.config).read_text())) if args.config else VerifyConfig()
    if args.lambdas:
        cfg.lambdas = [float(x) for x in args.lambdas.split(",")]
    report = verify_theorems(cfg)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: measured={c['measured']:.6g} "
              f"threshold={c['threshold']:.6g}")
    return EXIT_OK if report["passed"] else EXIT_CHECKS


def cmd_compare(args):
    rows = compare_runs(args.run_dirs)
    for r in sorted(rows, key=lambda r: -r.mean):
        print(f"{'*' if r.winner else ' '} {r.label:40s} {r.mean:12.4f} +- {r.std:.4f}")


def cmd_eval(args):
    env = make_env(args.env, args.time_cap)
    if args.policy in ("expert", "mediocre", "zero"):
        policy = scripted_controller(env, args.policy)
    else:
        policy = load_policy(args.policy)
    rec = evaluate_policy(env, policy, args.episodes, args.seed)
    print(json.dumps({"mean": rec.mean, "std": rec.std, "returns": rec.returns.tolist(),
                      "faults": rec.faults}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bail", description="Best-action imitation learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-batch", help="generate a batch file")
    g.add_argument("--env", default="point_reach")
    g.add_argument("--kind", choices=["training", "execution", "oracle"], default="training")
    g.add_argument("--m", type=int, default=30000)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--time-cap", type=int, default=150)
    g.add_argument("--policy", default="mediocre", help="execution batches: expert|mediocre|zero")
    g.add_argument("--gamma", type=float, default=0.95)
    g.add_argument("--returns-csv")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_batch)

    e = sub.add_parser("train-envelope", help="fit an upper envelope to a batch")
    e.add_argument("--batch", required=True)
    e.add_argument("--gamma", type=float, default=0.95)
    e.add_argument("--returns", choices=["plain", "augmented"], default="augmented")
    e.add_argument("--hidden", default="128,128")
    e.add_argument("--lr", type=float, default=3e-3)
    e.add_argument("--K", type=float, default=1000.0)
    e.add_argument("--lam", type=float, default=0.0)
    e.add_argument("--minibatch", type=int, default=256)
    e.add_argument("--epochs", type=int, default=50)
    e.add_argument("--patience", type=int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--trace")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_train_envelope)

    s = sub.add_parser("select", help="select best state-action pairs")
    s.add_argument("--batch", required=True)
    s.add_argument("--envelope")
    s.add_argument("--rule", choices=["auto", "ratio", "difference", "top_g"], default="auto")
    s.add_argument("--p", type=float, default=30.0)
    s.add_argument("--gamma", type=float, default=0.95)
    s.add_argument("--returns", choices=["plain", "augmented"], default="augmented")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_select)

    c = sub.add_parser("clone", help="behavior-clone a policy (optionally on a selection)")
    c.add_argument("--batch", required=True)
    c.add_argument("--selection")
    c.add_argument("--hidden", default="64,64")
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--minibatch", type=int, default=256)
    c.add_argument("--epochs", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_clone)

    for name, fn, hlp in (("run", cmd_run, "full pipeline over seeds and algorithms"),
                          ("progressive", cmd_progressive, "pipeline with Progressive BAIL")):
        r = sub.add_parser(name, help=hlp)
        r.add_argument("--config", help="JSON RunConfig; flags override it")
        r.add_argument("--name")
        r.add_argument("--env")
        r.add_argument("--time-cap", dest="time_cap", type=int)
        r.add_argument("--gamma", type=float)
        r.add_argument("--batch", dest="batch_path")
        r.add_argument("--batch-kind", dest="batch_kind")
        r.add_argument("--m", dest="batch_m", type=int)
        r.add_argument("--sigma", dest="batch_sigma", type=float)
        r.add_argument("--batch-seed", dest="batch_seed", type=int)
        r.add_argument("--behavior-policy", dest="behavior_policy")
        r.add_argument("--returns", dest="returns_kind")
        r.add_argument("--rule", dest="selection_rule")
        r.add_argument("--algorithms")
        r.add_argument("--seeds")
        r.add_argument("--eval-interval", dest="eval_interval", type=float)
        r.add_argument("--eval-episodes", dest="eval_episodes", type=int)
        r.add_argument("--policy-hidden", dest="policy_hidden")
        r.add_argument("--policy-epochs", dest="policy_epochs", type=int)
        r.add_argument("--envelope-epochs", dest="envelope_epochs", type=int)
        r.add_argument("--workers", type=int)
        r.add_argument("--out", dest="output_dir")
        r.set_defaults(fn=fn)

    v = sub.add_parser("verify", help="numerical theorem and heuristic checks")
    v.add_argument("--config")
    v.add_argument("--lambdas")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    cp = sub.add_parser("compare", help="compare finished runs")
    cp.add_argument("run_dirs", nargs="+")
    cp.set_defaults(fn=cmd_compare)

    ev = sub.add_parser("eval", help="evaluate a policy checkpoint or scripted controller")
    ev.add_argument("--env", default="point_reach")
    ev.add_argument("--time-cap", type=int, default=150)
    ev.add_argument("--policy", required=True)
    ev.add_argument("--episodes", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
    except (ConfigError, TypeError, NonPositiveEnvelope) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BatchFileError, BatchError, EnvelopeCheckpointError, PolicyCheckpointError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EnvelopeTrainingError, RolloutError, PipelineError, NonFiniteError) as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
