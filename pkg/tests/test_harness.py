import json
import logging

import numpy as np
import pytest

from bail.cli import main
from bail.dataset import Batch, save_batch
from bail.envs import BehaviorPolicy, expert_controller, generate_training_batch, make_env, rollout
from bail.envs import derive_rng
from bail.harness import (
    ConfigError,
    EvalRecord,
    PipelineError,
    RunConfig,
    compare_runs,
    evaluate_policy,
    final_score,
    relative_gap,
    run_pipeline,
    seed_score,
    winners,
)

TINY = dict(env="point_reach", time_cap=40, batch_m=1500, seeds=[0, 1], eval_episodes=3,
            envelope={"hidden_sizes": [16], "max_epochs": 3},
            policy={"hidden_sizes": [16], "epochs": 2}, save_checkpoints=True)


# -- evaluation --------------------------------------------------------------

def test_expert_eval_matches_rollouts():
    env = make_env("point_reach")
    expert = expert_controller(env)
    rec = evaluate_policy(env, expert, 10, seed=4)
    starts = env.initial_state_sampler(derive_rng(4, "eval"), 10)
    want = []
    for s0 in starts:
        ep = rollout(env, BehaviorPolicy(expert), 0, initial_state=s0)
        tot = 0.0
        for r in ep.rewards:
            tot += r
        want.append(tot)
    assert rec.returns.tolist() == want
    assert rec.mean == float(np.mean(want)) and rec.faults == 0


def test_nan_policy_scores_zero(caplog):
    env = make_env("hill_climb")
    with caplog.at_level(logging.WARNING):
        rec = evaluate_policy(env, lambda s: np.full((len(s), 1), np.nan), 10, seed=0)
    assert np.all(rec.returns == 0) and rec.faults == 10 and "faulted" in caplog.text


def test_crashing_policy_scores_zero():
    def boom(s):
        raise RuntimeError("boom")
    rec = evaluate_policy(make_env("point_reach"), boom, 4)
    assert np.all(rec.returns == 0) and rec.faults == 4


def test_eval_deterministic():
    env = make_env("hill_climb")
    a = evaluate_policy(env, expert_controller(env), 10, 3)
    b = evaluate_policy(env, expert_controller(env), 10, 3)
    assert np.array_equal(a.returns, b.returns)
    assert a.mean == pytest.approx(np.mean(a.returns)) and a.std == pytest.approx(np.std(a.returns))


# -- scoring -----------------------------------------------------------------

def test_seed_score_uses_last_ten():
    recs = [EvalRecord(k, np.zeros(1), float(k), 0.0) for k in range(1, 21)]
    assert seed_score(recs) == np.mean(range(11, 21))
    with pytest.raises(ValueError):
        seed_score([])
    fs = final_score({"0": 1.0, "1": 3.0})
    assert fs.mean == 2.0 and fs.std == 1.0


def test_winners_examples():
    assert sorted(winners({"a": 100, "b": 95})) == ["a", "b"]
    assert winners({"a": 100, "b": 80}) == ["a"]
    assert sorted(winners({"a": 7, "b": 7})) == ["a", "b"]
    assert sorted(winners({"a": -10, "b": -10.9, "c": -11.5})) == ["a", "b"]


def test_winners_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = dict(zip("abcde", rng.normal(size=5) * 10))
        c = float(rng.uniform(0.1, 10))
        assert winners(s) == winners({k: c * v for k, v in s.items()})


def test_relative_gap():
    assert relative_gap(90, 100) == 0.1 and relative_gap(-11, -10) == pytest.approx(0.1)


# -- config ------------------------------------------------------------------

def test_run_config_validation(tmp_path):
    for bad in ({"eval_interval": 0}, {"seeds": []}, {"env": "nope"}, {"algorithms": ["dqn"]},
                {"returns_kind": "oracle"}, {"batch_source": "file"}, {"envelope": {"K": 0.1}}):
        with pytest.raises(ConfigError):
            RunConfig(**bad)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"colour": "red"})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"env": "hill_climb", "seeds": [3]}))
    cfg = RunConfig.from_json(p, batch_m=100)
    assert cfg.env == "hill_climb" and cfg.seeds == [3] and cfg.batch_m == 100


def test_bail_out_env_var(monkeypatch, tmp_path):
    monkeypatch.setenv("BAIL_OUT", str(tmp_path))
    assert RunConfig().resolved_output_dir() == tmp_path


# -- pipeline ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    a = run_pipeline(RunConfig(name="a", output_dir=str(root), **TINY))
    b = run_pipeline(RunConfig(name="b", output_dir=str(root), **TINY))
    return a, b


def test_pipeline_outputs(tiny_runs):
    a, _ = tiny_runs
    summary = json.loads((a / "summary.json").read_text())
    assert set(summary["algorithms"]) == {"bail", "bc", "top_g", "regression_value"}
    for alg, v in summary["algorithms"].items():
        assert v["n_evals"] == 4  # floor(2 / 0.5)
        assert set(v["per_seed"]) == {"0", "1"}
        lines = (a / f"curves_{alg}.csv").read_text().splitlines()
        assert lines[0] == "seed,epoch,mean_return,std_return" and len(lines) == 1 + 2 * 4
    assert summary["winners"] and not summary["errors"]
    ck = {p.name for p in (a / "checkpoints").iterdir()}
    assert "seed0_envelope.bin" in ck and "seed1_bc_policy.bin" in ck
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["batch_m"] == 1500


def test_pipeline_bit_identical(tiny_runs):
    a, b = tiny_runs
    for f in sorted(p.name for p in a.glob("*.csv")):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    for f in sorted(p.name for p in (a / "checkpoints").iterdir()):
        assert (a / "checkpoints" / f).read_bytes() == (b / "checkpoints" / f).read_bytes()


def test_bc_run_skips_envelope(tmp_path):
    rd = run_pipeline(RunConfig(name="bc", output_dir=str(tmp_path), **{**TINY, "algorithms": ["bc"]}))
    names = {p.name for p in (rd / "checkpoints").iterdir()}
    assert not any("envelope" in n for n in names)


def test_compare_runs(tiny_runs):
    rows = compare_runs(list(tiny_runs))
    assert len(rows) == 8 and any(r.winner for r in rows)
    with pytest.raises(ConfigError):
        compare_runs([tiny_runs[0]])


def test_all_seeds_fail(tmp_path):
    bad = tmp_path / "nan.bin"
    b = generate_training_batch(make_env("point_reach", 20), 200, 0.5, 0)
    rewards = b.rewards.copy()
    rewards[5] = np.nan
    save_batch(Batch(b.states, b.actions, rewards, b.next_states, b.terminated, b.truncated,
                     b.episode_id, b.step_index, b.metadata), bad)
    cfg = RunConfig(name="f", output_dir=str(tmp_path), batch_source="file", batch_path=str(bad),
                    **{**TINY, "algorithms": ["bail"]})
    with pytest.raises(PipelineError):
        run_pipeline(cfg)
    assert "errors" in json.loads((tmp_path / "f" / "summary.json").read_text())


def test_execution_batch_behavior_score(tmp_path):
    rd = run_pipeline(RunConfig(name="x", output_dir=str(tmp_path), batch_kind="execution",
                                batch_sigma=0.0, **{**TINY, "algorithms": ["bc"]}))
    summary = json.loads((rd / "summary.json").read_text())
    assert set(summary["behavior_score"]) == {"0", "1"}


# -- CLI ---------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    b = tmp_path / "b.bin"
    assert main(["gen-batch", "--m", "800", "--time-cap", "40", "--out", str(b),
                 "--returns-csv", str(tmp_path / "g.csv")]) == 0
    assert main(["train-envelope", "--batch", str(b), "--hidden", "8", "--epochs", "2",
                 "--out", str(tmp_path / "e.bin"), "--trace", str(tmp_path / "t.csv")]) == 0
    assert main(["select", "--batch", str(b), "--envelope", str(tmp_path / "e.bin"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    assert main(["clone", "--batch", str(b), "--selection", str(tmp_path / "s.csv"), "--hidden", "8",
                 "--epochs", "1", "--out", str(tmp_path / "p.bin")]) == 0
    assert main(["eval", "--policy", str(tmp_path / "p.bin"), "--episodes", "3"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert json.loads(out[-1])["returns"].__len__() == 3
    assert json.loads(out[0])["m"] == 800


def test_cli_run_and_compare(tmp_path, capsys):
    common = ["--m", "1000", "--time-cap", "40", "--seeds", "0", "--algorithms", "bc,top_g",
              "--policy-hidden", "8", "--policy-epochs", "1", "--eval-episodes", "2", "--out", str(tmp_path)]
    assert main(["run", "--name", "r1", *common]) == 0
    assert main(["run", "--name", "r2", *common]) == 0
    assert main(["compare", str(tmp_path / "r1"), str(tmp_path / "r2")]) == 0
    assert "*" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path):
    assert main(["run", "--env", "nope"]) == 2
    assert main(["select", "--batch", str(tmp_path / "missing.bin"), "--out", "x.csv"]) == 3
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"NOTABATCHFILE")
    assert main(["train-envelope", "--batch", str(junk), "--out", str(tmp_path / "e.bin")]) == 3
    b = generate_training_batch(make_env("point_reach", 20), 200, 0.5, 0)
    rewards = b.rewards.copy()
    rewards[3] = np.inf
    nan = tmp_path / "nan.bin"
    save_batch(Batch(b.states, b.actions, rewards, b.next_states, b.terminated, b.truncated,
                     b.episode_id, b.step_index, b.metadata), nan)
    assert main(["train-envelope", "--batch", str(nan), "--hidden", "4", "--epochs", "1",
                 "--out", str(tmp_path / "e.bin")]) == 4


def test_cli_verify_reports(tmp_path, capsys):
    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"interp_epochs": 5, "l2_epochs": 5, "k_epochs": 5, "oracle_m": 600,
                               "oracle_time_cap": 30, "hidden_sizes": [8]}))
    code = main(["verify", "--config", str(cfg), "--lambdas", "1e6", "--out", str(tmp_path / "r.json")])
    assert code in (0, 1)
    report = json.loads((tmp_path / "r.json").read_text())
    assert len(report["checks"]) == 4
    for c in report["checks"]:
        assert {"name", "measured", "threshold", "passed"} <= set(c)
    lines = capsys.readouterr().out.splitlines()
    assert all(ln.startswith(("PASS", "FAIL")) for ln in lines)
