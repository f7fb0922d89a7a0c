"""Acceptance criteria, each at its stated tolerance and runtime budget.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one PASS/FAIL line per criterion with the measured quantities.
"""

import json
import time

import numpy as np
import pytest

from bail.dataset import (
    compute_augmented_returns,
    compute_returns,
    load_batch,
    save_batch,
    selection_size,
)
from bail.envelope import EnvelopeConfig, load_envelope, save_envelope, train_upper_envelope
from bail.envs import generate_oracle_batch, generate_training_batch, make_env
from bail.harness import RunConfig, relative_gap, run_pipeline
from bail.imitation import PolicyConfig, load_policy, save_policy, train_bc_all
from bail.numcore import (
    Squash,
    add_weight_decay,
    init_mlp,
    mlp_forward,
    mlp_gradient,
    mse_loss,
    penalty_loss,
)
from bail.selection import select_difference, select_ratio
from bail.verify import VerifyConfig, check_interpolation, check_k_trend, check_l2_limit

from builders import random_batch
from oracles import brute_force_selection, central_difference, max_relative_error

pytestmark = pytest.mark.slow


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def check(self):
        assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


def _summary(run_dir):
    return json.loads((run_dir / "summary.json").read_text())


# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient correctness vs central differences")
def test_criterion_01_gradients(record_property):
    budget = Budget(10)
    rng = np.random.default_rng(2024)
    worst = {"K=1": 0.0, "K=1000": 0.0, "mse": 0.0}
    for net in range(20):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(1, 17)) for _ in range(depth - 1)]
        x = rng.normal(size=(8, sizes[0]))
        for K in (1.0, 1000.0):
            p = init_mlp(sizes + [1], rng)
            g = rng.normal(size=8)

            def loss(q, K=K, g=g):
                return penalty_loss(mlp_forward(q, x)[:, 0], g, K)[0].total

            _, dv = penalty_loss(mlp_forward(p, x)[:, 0], g, K)
            analytic = mlp_gradient(p, x, dv.reshape(-1, 1)).arrays()
            key = "K=1" if K == 1 else "K=1000"
            worst[key] = max(worst[key], max_relative_error(analytic, central_difference(loss, p)))
        out_dim = int(rng.integers(1, 4))
        p = init_mlp(sizes + [out_dim], rng)
        t = rng.normal(size=(8, out_dim))

        def mloss(q, t=t):
            return mse_loss(mlp_forward(q, x), t)[0]

        _, d = mse_loss(mlp_forward(p, x), t)
        worst["mse"] = max(worst["mse"], max_relative_error(mlp_gradient(p, x, d).arrays(),
                                                            central_difference(mloss, p)))
    record_property("measured", ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
                    + f", {budget.elapsed:.1f}s")
    assert max(worst.values()) < 1e-4
    budget.check()


@pytest.mark.criterion(2, "return recursion exact; gamma=0 gives rewards")
def test_criterion_02_return_recursion(record_property):
    budget = Budget(1)
    rng = np.random.default_rng(7)
    b = random_batch(rng, n_eps=100, max_len=60)
    assert b.n_episodes == 100
    gamma = 0.95
    g = compute_returns(b, gamma).returns
    starts, lengths = b.episode_bounds()
    ends = starts + lengths - 1
    inner = np.setdiff1d(np.arange(b.m), ends)
    exact = np.array_equal(g[inner], b.rewards[inner] + gamma * g[inner + 1])
    exact_end = np.array_equal(g[ends], b.rewards[ends])
    zero = np.array_equal(compute_returns(b, 0.0).returns, b.rewards)
    record_property("measured", f"recursion exact={exact and exact_end}, gamma0 exact={zero}, "
                    f"{budget.elapsed * 1000:.0f}ms")
    assert exact and exact_end and zero
    budget.check()


@pytest.mark.criterion(3, "augmented returns track oracle returns")
def test_criterion_03_augmentation(tmp_path, record_property):
    budget = Budget(600)
    env = make_env("hill_climb", 150)
    batch, oracle = generate_oracle_batch(env, 30000, 0.5, 0, 0.95)
    aug = compute_augmented_returns(batch, 0.95)
    r = float(np.corrcoef(aug.returns, oracle.returns)[0, 1])
    common = dict(env="hill_climb", batch_kind="oracle", batch_sigma=0.5, algorithms=["bail"],
                  output_dir=str(tmp_path), save_checkpoints=False)
    s_aug = _summary(run_pipeline(RunConfig(name="aug", returns_kind="augmented", **common)))
    s_orc = _summary(run_pipeline(RunConfig(name="orc", returns_kind="oracle", **common)))
    a, o = s_aug["algorithms"]["bail"]["mean"], s_orc["algorithms"]["bail"]["mean"]
    gap = relative_gap(a, o)
    record_property("measured", f"pearson {r:.4f}, BAIL aug {a:.3f} vs oracle {o:.3f} "
                    f"(gap {gap:.1%}), {budget.elapsed:.0f}s")
    assert r > 0.95
    assert gap <= 0.15
    budget.check()


@pytest.mark.criterion(4, "interpolation at lambda=0 and flattening at lambda=1e6")
def test_criterion_04_envelope_limits(record_property):
    budget = Budget(300)
    cfg = VerifyConfig()
    interp = check_interpolation(cfg)
    l2 = check_l2_limit(cfg)
    record_property("measured", f"interp loss {interp['measured']:.2e}, "
                    f"l2 gap {l2['measured']:.2%} of range, {budget.elapsed:.0f}s")
    assert interp["measured"] < 1e-3
    assert l2["measured"] < 0.05
    budget.check()


@pytest.mark.criterion(5, "constraint violation non-increasing in K")
def test_criterion_05_k_trend(record_property):
    budget = Budget(300)
    res = check_k_trend(VerifyConfig(ks=[10.0, 100.0, 1000.0]))
    viol = [row["violation"] for row in res["sweep"]]
    record_property("measured", "violations " + ", ".join(f"{v:.3g}" for v in viol)
                    + f", {budget.elapsed:.0f}s")
    for a, b in zip(viol, viol[1:]):
        assert b <= a * 1.10
    budget.check()


@pytest.mark.criterion(6, "selection cardinality, invariances, brute-force agreement")
def test_criterion_06_selection(record_property):
    budget = Budget(10)
    rng = np.random.default_rng(99)
    for _ in range(1000):
        m = int(rng.integers(1, 60))
        # quarter-integers: exact under scaling by powers of two and integer shifts
        g = rng.integers(-40, 41, size=m) / 4
        v = rng.integers(1, 41, size=m) / 4
        p = float(rng.choice([rng.uniform(0.1, 100), rng.integers(1, 101)]))
        n = selection_size(p, m)
        ratio, diff = select_ratio(g, v, p), select_difference(g, v, p)
        assert len(ratio.indices) == len(diff.indices) == n
        assert ratio.indices.tolist() == brute_force_selection((g / v).tolist(), p)
        assert diff.indices.tolist() == brute_force_selection((g - v).tolist(), p)
        c = float(2.0 ** rng.integers(-3, 4))
        scaled = select_ratio(c * g, c * v, p)
        assert np.array_equal(scaled.indices, ratio.indices) and scaled.threshold_x == ratio.threshold_x
        shift = float(rng.integers(-10, 11))
        assert np.array_equal(select_difference(g + shift, v + shift, p).indices, diff.indices)
    record_property("measured", f"1000 instances, {budget.elapsed:.1f}s")
    budget.check()


BATCHES_7 = [(env, sigma, seed) for env in ("point_reach", "hill_climb")
             for sigma in (0.1, 0.5) for seed in (0, 1)]


@pytest.mark.criterion(7, "BAIL beats BC; BAIL >= batch mean; BAIL >= top-G on >= 3/4 batches")
def test_criterion_07_headline(tmp_path, record_property):
    budget = Budget(1800)
    rows = []
    for env, sigma, bseed in BATCHES_7:
        cfg = RunConfig(name=f"{env}_{sigma}_{bseed}", env=env, batch_sigma=sigma, batch_seed=bseed,
                        algorithms=["bail", "bc", "top_g"], output_dir=str(tmp_path),
                        save_checkpoints=False)
        s = _summary(run_pipeline(cfg))
        al = s["algorithms"]
        seeds = sorted(al["bail"]["per_seed"])
        beats_bc = sum(al["bail"]["per_seed"][k] > al["bc"]["per_seed"][k] for k in seeds)
        rows.append({
            "batch": cfg.name, "bail": al["bail"]["mean"], "bc": al["bc"]["mean"],
            "top_g": al["top_g"]["mean"], "batch_mean": s["batch_mean_return"][seeds[0]],
            "beats_bc": beats_bc, "n_seeds": len(seeds),
        })
    for r in rows:
        print(f"{r['batch']:24s} bail {r['bail']:9.3f} bc {r['bc']:9.3f} top_g {r['top_g']:9.3f} "
              f"batch {r['batch_mean']:9.3f} bail>bc seeds {r['beats_bc']}/{r['n_seeds']}")
    ok_bc = all(r["beats_bc"] >= 4 for r in rows)
    ok_mean = all(r["bail"] >= r["batch_mean"] for r in rows)
    n_topg = sum(r["bail"] >= r["top_g"] for r in rows)
    record_property("measured", f"bail>bc>=4/5 on {sum(r['beats_bc'] >= 4 for r in rows)}/8, "
                    f"bail>=batch mean on {sum(r['bail'] >= r['batch_mean'] for r in rows)}/8, "
                    f"bail>=top_g on {n_topg}/8 (need 6), {budget.elapsed:.0f}s")
    assert ok_bc, "BAIL failed to beat BC on 4/5 seeds somewhere"
    assert ok_mean, "BAIL below the batch mean somewhere"
    assert n_topg >= 6, f"BAIL >= top-G on only {n_topg}/8 batches"
    budget.check()


@pytest.mark.criterion(8, "execution batch: BC ~ behavior policy, BAIL ~ BC")
def test_criterion_08_execution(tmp_path, record_property):
    budget = Budget(600)
    cfg = RunConfig(name="exec", batch_kind="execution", behavior_policy="mediocre", batch_sigma=0.0,
                    algorithms=["bail", "bc"], output_dir=str(tmp_path), save_checkpoints=False)
    s = _summary(run_pipeline(cfg))
    behavior = float(np.mean(list(s["behavior_score"].values())))
    bc, bail = s["algorithms"]["bc"]["mean"], s["algorithms"]["bail"]["mean"]
    g_bc, g_bail = relative_gap(bc, behavior), relative_gap(bail, bc)
    record_property("measured", f"behavior {behavior:.3f}, BC {bc:.3f} ({g_bc:.1%}), "
                    f"BAIL {bail:.3f} ({g_bail:.1%} from BC), {budget.elapsed:.0f}s")
    assert g_bc <= 0.10
    assert g_bail <= 0.15
    budget.check()


@pytest.mark.criterion(9, "Progressive BAIL within 20% of BAIL")
def test_criterion_09_progressive(tmp_path, record_property):
    budget = Budget(900)
    cfg = RunConfig(name="prog", algorithms=["bail", "progressive_bail"], output_dir=str(tmp_path),
                    save_checkpoints=False)
    s = _summary(run_pipeline(cfg))
    bail, prog = s["algorithms"]["bail"]["mean"], s["algorithms"]["progressive_bail"]["mean"]
    gap = relative_gap(prog, bail)
    record_property("measured", f"BAIL {bail:.3f}, progressive {prog:.3f} (gap {gap:.1%}), "
                    f"{budget.elapsed:.0f}s")
    assert gap <= 0.20
    budget.check()


@pytest.mark.criterion(10, "bit-identical reruns and exact checkpoint round-trips")
def test_criterion_10_determinism(tmp_path, record_property):
    budget = Budget(60)
    small = dict(env="hill_climb", time_cap=50, batch_m=3000, seeds=[0, 1], eval_episodes=4,
                 envelope={"hidden_sizes": [32, 32], "max_epochs": 5},
                 policy={"hidden_sizes": [32], "epochs": 5}, output_dir=str(tmp_path))
    a = run_pipeline(RunConfig(name="a", **small))
    b = run_pipeline(RunConfig(name="b", **small))
    csvs = sorted(p.name for p in a.glob("*.csv")) + [
        f"checkpoints/{p.name}" for p in (a / "checkpoints").glob("*.csv")]
    same_csv = all((a / f).read_bytes() == (b / f).read_bytes() for f in csvs)
    same_ckpt = all((a / "checkpoints" / p.name).read_bytes() == (b / "checkpoints" / p.name).read_bytes()
                    for p in (a / "checkpoints").iterdir())

    batch = generate_training_batch(make_env("point_reach", 50), 2000, 0.5, 3)
    save_batch(batch, tmp_path / "b.bin")
    batch_ok = load_batch(tmp_path / "b.bin").equals(batch)
    g = compute_augmented_returns(batch, 0.95)
    from bail.dataset import split_train_validation
    env, _ = train_upper_envelope(batch, g, split_train_validation(batch, 0.8, 0),
                                  EnvelopeConfig(hidden_sizes=[16], max_epochs=3))
    save_envelope(env, tmp_path / "e.bin")
    env_back = load_envelope(tmp_path / "e.bin")
    pol = train_bc_all(batch, PolicyConfig(hidden_sizes=[16], epochs=2))
    save_policy(pol, tmp_path / "p.bin")
    pol_back = load_policy(tmp_path / "p.bin")
    env_ok = env_back.equals(env)
    pol_ok = pol_back.equals(pol) and np.array_equal(pol_back(batch.states), pol(batch.states))
    record_property("measured", f"{len(csvs)} CSVs identical={same_csv}, checkpoints identical={same_ckpt}, "
                    f"round-trips batch={batch_ok} envelope={env_ok} policy={pol_ok}, {budget.elapsed:.0f}s")
    assert same_csv and same_ckpt and batch_ok and env_ok and pol_ok
    budget.check()


def test_progressive_not_worse_than_bc(tmp_path):
    """Companion measurement: Progressive BAIL vs BC on the default training batch."""
    cfg = RunConfig(name="prog_bc", algorithms=["progressive_bail", "bc"], output_dir=str(tmp_path),
                    save_checkpoints=False)
    al = _summary(run_pipeline(cfg))["algorithms"]
    assert al["progressive_bail"]["mean"] >= al["bc"]["mean"]
