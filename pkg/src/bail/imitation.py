"""Deterministic policies trained by action regression.

Policies are ReLU MLPs whose raw outputs are squashed by ``tanh`` onto the
action box. The loss is the summed squared error between squashed outputs
and batch actions.

Policy checkpoint layout (little-endian)::

    b"BAILPLCY"  u32 version  u32 n_sizes  u32 * n_sizes  f64 payload
    f64 * action_dim low  f64 * action_dim high  u32 json_len  JSON config
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bail.envelope import EnvelopeConfig, EnvelopeTrainer, UpperEnvelope, envelope_value, train_upper_envelope
from bail.envs import derive_rng
from bail.numcore import (
    AdamState,
    MlpParams,
    Squash,
    adam_step,
    forward_and_gradient,
    init_mlp,
    mlp_forward,
    mse_loss,
    params_from_buffer,
    params_to_bytes,
    read_layer_sizes,
)
from bail.selection import MIN_ENVELOPE_VALUE, select, select_difference, select_ratio

log = logging.getLogger(__name__)

POLICY_MAGIC = b"BAILPLCY"
POLICY_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class PolicyConfig:
    hidden_sizes: list = field(default_factory=lambda: [400, 300])
    learning_rate: float = 1e-3
    minibatch_size: int = 256
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.minibatch_size < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("sizes must be positive")

    @classmethod
    def from_dict(cls, d) -> "PolicyConfig":
        return cls(**d)


@dataclass
class Policy:
    params: MlpParams
    action_low: np.ndarray
    action_high: np.ndarray
    config: PolicyConfig

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64).ravel()
        self.action_high = np.asarray(self.action_high, dtype=np.float64).ravel()
        self._squash = Squash(self.action_low, self.action_high)

    def __call__(self, states) -> np.ndarray:
        return self._squash(mlp_forward(self.params, np.atleast_2d(states)))

    def equals(self, other: "Policy") -> bool:
        return (self.params.equals(other.params)
                and np.array_equal(self.action_low, other.action_low)
                and np.array_equal(self.action_high, other.action_high)
                and asdict(self.config) == asdict(other.config))


def _bounds(batch, action_low, action_high):
    if action_low is None:
        env = batch.metadata.get("env")
        if env is not None:
            from bail.envs import make_env
            spec = make_env(env, int(batch.metadata.get("time_cap", 150)))
            return spec.action_low, spec.action_high
        return batch.actions.min(axis=0) - 1e-6, batch.actions.max(axis=0) + 1e-6
    return action_low, action_high


class _PolicyLearner:
    def __init__(self, state_dim, action_low, action_high, config: PolicyConfig):
        self.config = config
        self.squash = Squash(action_low, action_high)
        sizes = [state_dim] + list(config.hidden_sizes) + [len(self.squash.low)]
        self.params = init_mlp(sizes, derive_rng(config.seed, "policy", "init"))
        self.adam = AdamState.fresh(self.params)

    def step(self, states, actions) -> float:
        def loss_grad(raw):
            loss, d_out = mse_loss(self.squash(raw), actions)
            return loss, self.squash.backward(raw, d_out)

        _, loss, grads = forward_and_gradient(self.params, states, loss_grad)
        self.params, self.adam = adam_step(self.params, grads, self.adam, self.config.learning_rate)
        return loss

    def policy(self) -> Policy:
        return Policy(self.params, self.squash.low, self.squash.high, self.config)


def _eval_steps(steps_per_epoch, epochs, eval_interval):
    """Global step counts after which an evaluation happens, with their epoch stamps."""
    if not eval_interval:
        return {}
    n_evals = int(math.floor(epochs / eval_interval + 1e-9))
    out = {}
    for k in range(1, n_evals + 1):
        out[int(round(k * eval_interval * steps_per_epoch))] = k * eval_interval
    return out


def train_policy_bc(batch, indices, config: PolicyConfig, on_eval=None, eval_interval=None,
                    action_low=None, action_high=None, loss_log=None) -> Policy:
    """Regress actions on states over ``batch[indices]`` with minibatch Adam.

    ``on_eval(epoch, policy)`` is called every ``eval_interval`` epochs
    (fractions allowed). ``loss_log``, if a list, receives the full-set loss
    at each epoch end.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("empty selection: nothing to imitate")
    low, high = _bounds(batch, action_low, action_high)
    S, A = batch.states[indices], batch.actions[indices]
    learner = _PolicyLearner(batch.state_dim, low, high, config)
    mb = config.minibatch_size
    spe = int(math.ceil(len(indices) / mb))
    evals = _eval_steps(spe, config.epochs, eval_interval) if on_eval else {}
    step = 0
    for epoch in range(config.epochs):
        perm = derive_rng(config.seed, "policy", "shuffle", epoch).permutation(len(indices))
        for start in range(0, len(perm), mb):
            rows = perm[start:start + mb]
            learner.step(S[rows], A[rows])
            step += 1
            if step in evals:
                on_eval(evals[step], learner.policy())
        if loss_log is not None:
            loss_log.append(mse_loss(learner.policy()(S), A)[0])
    return learner.policy()


def train_bc_all(batch, config: PolicyConfig, **kw) -> Policy:
    """Vanilla behavior cloning on every transition."""
    return train_policy_bc(batch, np.arange(len(batch)), config, **kw)


def train_progressive_bail(batch, returns, split, envelope_config: EnvelopeConfig,
                           policy_config: PolicyConfig, p_percent: float = 25.0,
                           on_eval=None, eval_interval=None, action_low=None, action_high=None,
                           rule: str = "ratio"):
    """Envelope and policy updated in one loop over minibatches of the training split.

    Each iteration: one penalty-loss step on the envelope, pick the top
    ``p%`` of the same minibatch by ``G / V`` under the updated envelope
    (``G - V`` when some ``V <= 0``), one policy step on those rows.
    Validation bookkeeping runs at each epoch end. The loop runs for
    ``policy_config.epochs`` epochs. Returns ``(Policy, UpperEnvelope)``.
    """
    g = np.asarray(getattr(returns, "returns", returns), dtype=np.float64)
    trainer = EnvelopeTrainer(batch.states, g, envelope_config, split.train_indices,
                              split.validation_indices)
    low, high = _bounds(batch, action_low, action_high)
    learner = _PolicyLearner(batch.state_dim, low, high, policy_config)
    train_idx = np.asarray(split.train_indices, dtype=np.int64)
    mb = policy_config.minibatch_size
    spe = int(math.ceil(len(train_idx) / mb))
    evals = _eval_steps(spe, policy_config.epochs, eval_interval) if on_eval else {}
    fallbacks = 0
    step = 0
    for epoch in range(policy_config.epochs):
        perm = train_idx[derive_rng(policy_config.seed, "progressive", "shuffle", epoch)
                         .permutation(len(train_idx))]
        for start in range(0, len(perm), mb):
            rows = perm[start:start + mb]
            trainer.step(rows)
            v = trainer.values(rows)
            if rule == "ratio" and np.all(v > MIN_ENVELOPE_VALUE):
                chosen = select_ratio(g[rows], v, p_percent).indices
            elif rule in ("ratio", "difference"):
                if rule == "ratio":
                    fallbacks += 1
                chosen = select_difference(g[rows], v, p_percent).indices
            else:
                raise ValueError(f"unknown rule {rule!r}")
            learner.step(batch.states[rows[chosen]], batch.actions[rows[chosen]])
            step += 1
            if step in evals:
                on_eval(evals[step], learner.policy())
        trainer.end_epoch()
    if fallbacks:
        log.info("progressive BAIL: %d minibatches fell back to the difference rule", fallbacks)
    return learner.policy(), trainer.result()


def train_regression_value_and_select(batch, returns, split, config: EnvelopeConfig,
                                      p_percent: float, rule: str = "auto",
                                      return_value: bool = False):
    """Ablation: a symmetric least-squares value fit (``K = 1``) in place of the envelope."""
    from dataclasses import replace

    value, _ = train_upper_envelope(batch, returns, split, replace(config, K=1.0))
    g = np.asarray(getattr(returns, "returns", returns), dtype=np.float64)
    result = select(g, envelope_value(value, batch.states), p_percent, rule)
    return (result, value) if return_value else result


def bail_select(batch, returns, envelope: UpperEnvelope, p_percent: float, rule: str = "auto"):
    g = np.asarray(getattr(returns, "returns", returns), dtype=np.float64)
    return select(g, envelope_value(envelope, batch.states), p_percent, rule)


# --------------------------------------------------------------------------
# checkpoints

_U32 = struct.Struct("<I")


def save_policy(policy: Policy, path) -> None:
    blob = json.dumps(asdict(policy.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(POLICY_MAGIC)
        fh.write(_U32.pack(POLICY_VERSION))
        fh.write(params_to_bytes(policy.params))
        fh.write(policy.action_low.astype("<f8").tobytes())
        fh.write(policy.action_high.astype("<f8").tobytes())
        fh.write(_U32.pack(len(blob)))
        fh.write(blob)


def load_policy(path) -> Policy:
    buf = Path(path).read_bytes()
    if buf[:8] != POLICY_MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    try:
        version, = _U32.unpack_from(buf, 8)
        if version != POLICY_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {POLICY_VERSION}")
        sizes, pos = read_layer_sizes(buf, 12)
        params, pos = params_from_buffer(buf, pos, sizes)
        d = sizes[-1]
        if len(buf) < pos + 16 * d:
            raise EOFError("action bounds cut short")
        low = np.frombuffer(buf, "<f8", d, pos).astype(np.float64)
        high = np.frombuffer(buf, "<f8", d, pos + 8 * d).astype(np.float64)
        pos += 16 * d
        jlen, = _U32.unpack_from(buf, pos)
        pos += 4
        if len(buf) < pos + jlen:
            raise EOFError("config JSON cut short")
        config = PolicyConfig.from_dict(json.loads(buf[pos:pos + jlen].decode("utf-8")))
    except (struct.error, EOFError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return Policy(params, low, high, config)
