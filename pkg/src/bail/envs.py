"""Deterministic toy control tasks and the batch generators built on them.

Both environments have a scripted expert, so "expert performance" is a
known number. Dynamics, rewards and controllers all act row-wise on 2-D
arrays, which lets evaluation step many episodes at once.

point_reach
    state = position in R^2, action in [-1, 1]^2, ``s' = s + 0.1 a``,
    reward ``-||s'||``, terminates once ``||s'|| < 0.05``.
hill_climb
    state in R, action in [-1, 1], ``s' = s + 0.1 a (1 - tanh(s)^2)``,
    reward ``-(s' - 1)^2``, never terminates on its own.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from bail.dataset import Batch, ReturnsTable, compute_returns

ENV_NAMES = ("point_reach", "hill_climb")


class RolloutError(RuntimeError):
    """A policy produced a non-finite action, or the environment blew up."""


def derive_seed(seed: int, *labels) -> np.random.SeedSequence:
    """Seed stream for a named stage; stable across processes and runs."""
    words = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            words.append(int(lab) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(lab).encode("utf-8")))
    return np.random.SeedSequence(words)


def derive_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    time_cap: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    initial_state_sampler: Callable[[np.random.Generator, int], np.ndarray]

    def step(self, s, a):
        """Single or row-wise step; returns ``(s', r, terminated)``."""
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        single = s.ndim == 1
        s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
        nxt = self.dynamics(s2, a2)
        r = self.reward(s2, a2)
        done = self.terminal(nxt)
        if single:
            return nxt[0], float(r[0]), bool(done[0])
        return nxt, r, done

    def clip(self, a):
        return np.clip(a, self.action_low, self.action_high)


# -- point_reach ------------------------------------------------------------

def _pr_dynamics(s, a):
    return s + 0.1 * a


def _pr_reward(s, a):
    nxt = s + 0.1 * a
    return -np.sqrt(np.sum(nxt * nxt, axis=1))


def _pr_terminal(nxt):
    return np.sqrt(np.sum(nxt * nxt, axis=1)) < 0.05


def _pr_init(rng, n):
    return rng.uniform(-1.0, 1.0, size=(n, 2))


# -- hill_climb -------------------------------------------------------------

def _hc_gain(s):
    t = np.tanh(s)
    return 0.1 * (1.0 - t * t)


def _hc_dynamics(s, a):
    return s + a * _hc_gain(s)


def _hc_reward(s, a):
    nxt = s + a * _hc_gain(s)
    return -((nxt[:, 0] - 1.0) ** 2)


def _hc_terminal(nxt):
    return np.zeros(nxt.shape[0], dtype=bool)


def _hc_init(rng, n):
    return rng.uniform(-1.5, 1.0, size=(n, 1))


def make_env(name: str, time_cap: int = 150) -> EnvSpec:
    if time_cap < 1:
        raise ValueError(f"time_cap must be positive, got {time_cap}")
    if name == "point_reach":
        return EnvSpec(name, 2, 2, np.array([-1.0, -1.0]), np.array([1.0, 1.0]), int(time_cap),
                       _pr_dynamics, _pr_reward, _pr_terminal, _pr_init)
    if name == "hill_climb":
        return EnvSpec(name, 1, 1, np.array([-1.0]), np.array([1.0]), int(time_cap),
                       _hc_dynamics, _hc_reward, _hc_terminal, _hc_init)
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


# -- scripted controllers ---------------------------------------------------

def expert_controller(env: EnvSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Greedy controller that heads straight for the goal at full speed."""
    if env.name == "point_reach":
        return lambda s: np.clip(-10.0 * np.atleast_2d(s), -1.0, 1.0)
    if env.name == "hill_climb":
        def hill(s):
            s = np.atleast_2d(s)
            return np.clip((1.0 - s) / _hc_gain(s), -1.0, 1.0)
        return hill
    raise ValueError(env.name)


def mediocre_controller(env: EnvSpec, strength: float = 0.3) -> Callable[[np.ndarray], np.ndarray]:
    """The expert's action shrunk toward zero; reaches the goal, slowly."""
    expert = expert_controller(env)
    return lambda s: strength * expert(s)


def zero_controller(env: EnvSpec) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: np.zeros((np.atleast_2d(s).shape[0], env.action_dim))


def scripted_controller(env: EnvSpec, kind: str):
    table = {"expert": expert_controller, "mediocre": mediocre_controller, "zero": zero_controller}
    if kind not in table:
        raise ValueError(f"unknown controller {kind!r}; choose from {sorted(table)}")
    return table[kind](env)


@dataclass(frozen=True)
class BehaviorPolicy:
    """``base(s)``, blended with uniform random actions, plus Gaussian noise.

    The emitted action is ``(1 - random_weight) * base(s) + random_weight * u
    + N(0, noise_sigma^2)`` with ``u`` uniform over the action box, clipped
    to the box. Noise is added before clipping.
    """

    base: Callable[[np.ndarray], np.ndarray]
    noise_sigma: float = 0.0
    rng_seed: int = 0
    random_weight: float = 0.0

    def act(self, env: EnvSpec, s, rng: np.random.Generator) -> np.ndarray:
        s2 = np.atleast_2d(s)
        a = np.asarray(self.base(s2), dtype=np.float64).reshape(s2.shape[0], env.action_dim)
        if self.random_weight > 0:
            u = rng.uniform(env.action_low, env.action_high, size=a.shape)
            a = (1.0 - self.random_weight) * a + self.random_weight * u
        if self.noise_sigma > 0:
            a = a + rng.normal(0.0, self.noise_sigma, size=a.shape)
        return a


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminated: bool
    truncated: bool

    def __len__(self):
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def head(self, n: int) -> "Episode":
        """First ``n`` steps; marked truncated if that cuts anything off."""
        if n >= len(self):
            return self
        return Episode(self.states[:n], self.actions[:n], self.rewards[:n],
                       self.next_states[:n], False, True)


def rollout(env: EnvSpec, policy: BehaviorPolicy, seed: int, max_steps: int | None = None,
            initial_state=None) -> Episode:
    """Run one episode; reproducible from ``(env, policy, seed)``."""
    max_steps = env.time_cap if max_steps is None else int(max_steps)
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = derive_rng(seed, "rollout", policy.rng_seed)
    if initial_state is None:
        s = env.initial_state_sampler(rng, 1)[0]
    else:
        s = np.asarray(initial_state, dtype=np.float64).reshape(env.state_dim)
    S, A, R, SN = [], [], [], []
    terminated = False
    for _ in range(max_steps):
        a = policy.act(env, s, rng)[0]
        if not np.all(np.isfinite(a)):
            raise RolloutError(f"non-finite action {a} at step {len(R) + 1}")
        a = env.clip(a)
        nxt, r, done = env.step(s, a)
        if not (np.all(np.isfinite(nxt)) and np.isfinite(r)):
            raise RolloutError(f"environment produced non-finite output at step {len(R) + 1}")
        S.append(s)
        A.append(a)
        R.append(r)
        SN.append(nxt)
        s = nxt
        if done:
            terminated = True
            break
    n = len(R)
    return Episode(np.array(S).reshape(n, env.state_dim), np.array(A).reshape(n, env.action_dim),
                   np.array(R, dtype=np.float64), np.array(SN).reshape(n, env.state_dim),
                   terminated, (not terminated) and n == max_steps)


def _meta(env, kind, sigma, seed, **extra):
    meta = {"env": env.name, "time_cap": env.time_cap, "generator": kind,
            "sigma": float(sigma), "seed": int(seed)}
    meta.update(extra)
    return meta


def _collect(env: EnvSpec, m: int, seed: int, policy_for, max_steps: int):
    """Roll out episodes until ``m`` stored transitions exist.

    ``policy_for(progress)`` gives the behavior policy for an episode that
    starts when ``progress`` (fraction of ``m`` already collected) is reached.
    Returns the full rollouts alongside the stored heads.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    full, stored = [], []
    count = 0
    k = 0
    while count < m:
        policy = policy_for(count / m)
        ep = rollout(env, policy, int(derive_seed(seed, "episode", k).generate_state(1)[0]),
                     max_steps=max_steps)
        head = ep.head(min(env.time_cap, m - count))
        full.append(ep)
        stored.append(head)
        count += len(head)
        k += 1
    return full, stored


def improving_schedule(env: EnvSpec, sigma: float, expert=None):
    """Behavior that moves linearly from uniform-random to the expert."""
    expert = expert_controller(env) if expert is None else expert
    return lambda progress: BehaviorPolicy(expert, sigma, 0, random_weight=1.0 - progress)


def generate_training_batch(env: EnvSpec, m: int, sigma: float, seed: int, expert=None,
                            schedule=None) -> Batch:
    """Mixed-quality data: near-random early episodes, near-expert late ones."""
    schedule = improving_schedule(env, sigma, expert) if schedule is None else schedule
    _, stored = _collect(env, m, seed, schedule, env.time_cap)
    return Batch.from_episodes(stored, _meta(env, "training", sigma, seed))


def generate_execution_batch(env: EnvSpec, m: int, policy, sigma: float, seed: int,
                             policy_name: str = "custom") -> Batch:
    """Data from one fixed base policy (a callable ``s -> a``) plus noise."""
    if isinstance(policy, str):
        policy_name, policy = policy, scripted_controller(env, policy)
    behavior = BehaviorPolicy(policy, sigma, 0)
    _, stored = _collect(env, m, seed, lambda _: behavior, env.time_cap)
    return Batch.from_episodes(stored, _meta(env, "execution", sigma, seed, policy=policy_name))


def generate_oracle_batch(env: EnvSpec, m: int, sigma: float, seed: int, gamma: float,
                          time_cap_multiplier: int = 2, schedule=None):
    """Training-style batch whose returns come from rollouts run past the cap.

    Episodes run for up to ``time_cap_multiplier * T`` steps; only the first
    ``T`` transitions are stored, but their returns use every reward of the
    long rollout.
    """
    if time_cap_multiplier < 2:
        raise ValueError("time_cap_multiplier must be >= 2")
    schedule = improving_schedule(env, sigma) if schedule is None else schedule
    full, stored = _collect(env, m, seed, schedule, time_cap_multiplier * env.time_cap)
    long_batch = Batch.from_episodes(full)
    long_g = compute_returns(long_batch, gamma).returns
    starts, _ = long_batch.episode_bounds()
    g = np.concatenate([long_g[st:st + len(h)] for st, h in zip(starts, stored)])
    batch = Batch.from_episodes(stored, _meta(env, "oracle", sigma, seed,
                                              time_cap_multiplier=int(time_cap_multiplier)))
    return batch, ReturnsTable(g, "oracle", float(gamma))
