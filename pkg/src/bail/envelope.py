"""Upper-envelope value networks fit with the asymmetric penalty loss.

Training minimizes the K-weighted loss with minibatch Adam. After every
epoch the same loss (without the weight penalty) is measured on the
validation split; the best-scoring parameters are kept, and after
``patience`` consecutive epochs worse than the best the live parameters are
reset to it. Training then continues until ``max_epochs``.

Checkpoint layout (little-endian)::

    b"BAILENVL"  u32 version  u32 n_param_sets
    u32 n_sizes  u32 * n_sizes  f64 payload (best params [, final params])
    u32 json_len  JSON {config, validation_history, input_shift, input_scale}
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from bail.envs import derive_rng
from bail.numcore import (
    AdamState,
    MlpParams,
    NonFiniteError,
    ShapeError,
    adam_step,
    add_weight_decay,
    forward_and_gradient,
    init_mlp,
    mlp_forward,
    params_from_buffer,
    params_to_bytes,
    penalty_loss,
    read_layer_sizes,
)

ENVELOPE_MAGIC = b"BAILENVL"
ENVELOPE_VERSION = 1


class EnvelopeTrainingError(RuntimeError):
    def __init__(self, message, epoch=None, minibatch=None):
        super().__init__(f"{message} (epoch {epoch}, minibatch {minibatch})")
        self.epoch = epoch
        self.minibatch = minibatch


class CheckpointError(Exception):
    pass


@dataclass
class EnvelopeConfig:
    hidden_sizes: list = field(default_factory=lambda: [128, 128])
    learning_rate: float = 3e-3
    K: float = 1000.0
    lam: float = 0.0
    minibatch_size: int = 256
    max_epochs: int = 50
    patience: int = 4
    seed: int = 0
    early_stopping: bool = True
    normalize_inputs: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.minibatch_size < 1 or self.max_epochs < 0:
            raise ValueError("minibatch_size must be >= 1 and max_epochs >= 0")
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]

    @classmethod
    def from_dict(cls, d) -> "EnvelopeConfig":
        return cls(**d)


@dataclass
class UpperEnvelope:
    params: MlpParams
    final_train_params: MlpParams
    config: EnvelopeConfig
    validation_history: list = field(default_factory=list)
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def value(self, states) -> np.ndarray:
        return envelope_value(self, states)

    def equals(self, other: "UpperEnvelope") -> bool:
        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        return (self.params.equals(other.params)
                and self.final_train_params.equals(other.final_train_params)
                and asdict(self.config) == asdict(other.config)
                and [tuple(h) for h in self.validation_history] == [tuple(h) for h in other.validation_history]
                and same(self.input_shift, other.input_shift)
                and same(self.input_scale, other.input_scale))


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    violation_fraction: list = field(default_factory=list)
    resets: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "violation_fraction"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.violation_fraction):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _states_of(data) -> np.ndarray:
    states = getattr(data, "states", data)
    states = np.asarray(states, dtype=np.float64)
    return states.reshape(-1, 1) if states.ndim == 1 else states


def _returns_of(returns) -> np.ndarray:
    return np.asarray(getattr(returns, "returns", returns), dtype=np.float64).ravel()


def _apply_norm(env_or_shift, scale, states):
    if env_or_shift is None:
        return states
    return (states - env_or_shift) / scale


def envelope_value(envelope: UpperEnvelope, states) -> np.ndarray:
    """``V(s)`` from the best-validation parameters, one value per row."""
    width = envelope.params.layer_sizes[0]
    raw = np.asarray(states, dtype=np.float64)
    x = raw.reshape(1, -1) if raw.ndim == 1 and width > 1 and raw.size == width else _states_of(states)
    if x.shape[1] != envelope.params.layer_sizes[0]:
        raise ShapeError(f"states of dim {x.shape[1]}, envelope expects {envelope.params.layer_sizes[0]}")
    x = _apply_norm(envelope.input_shift, envelope.input_scale, x)
    return mlp_forward(envelope.params, x)[:, 0]


class EnvelopeTrainer:
    """Step-level driver shared by one-shot and progressive training.

    ``step(rows)`` takes one Adam step on the given training rows;
    ``end_epoch()`` runs the validation bookkeeping.
    """

    def __init__(self, states, returns, config: EnvelopeConfig, train_idx, val_idx=None):
        self.config = config
        self.states = _states_of(states)
        self.returns = _returns_of(returns)
        if self.states.shape[0] != self.returns.shape[0]:
            raise ShapeError(f"{self.states.shape[0]} states but {self.returns.shape[0]} returns")
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.val_idx = None if val_idx is None or len(val_idx) == 0 else np.asarray(val_idx, np.int64)
        if len(self.train_idx) == 0:
            raise ValueError("empty training set")
        self.shift = self.scale = None
        if config.normalize_inputs:
            tr = self.states[self.train_idx]
            self.shift = tr.mean(axis=0)
            self.scale = np.where(tr.std(axis=0) > 0, tr.std(axis=0), 1.0)
        self.x = _apply_norm(self.shift, self.scale, self.states)
        sizes = [self.states.shape[1]] + list(config.hidden_sizes) + [1]
        self.params = init_mlp(sizes, derive_rng(config.seed, "envelope", "init"))
        self.adam = AdamState.fresh(self.params)
        self.best = self.params.copy()
        self.best_val = np.inf
        self.bad_epochs = 0
        self.epoch = 0
        self.minibatch = 0
        self.history: list = []
        self.trace = TrainTrace()

    def values(self, rows=None) -> np.ndarray:
        x = self.x if rows is None else self.x[rows]
        return mlp_forward(self.params, x)[:, 0]

    def step(self, rows) -> None:
        cfg = self.config
        g = self.returns[rows]

        def loss_grad(out):
            rep, dv = penalty_loss(out[:, 0], g, cfg.K)
            return rep, dv

        try:
            _, rep, grads = forward_and_gradient(self.params, self.x[rows], loss_grad)
        except NonFiniteError as exc:
            raise EnvelopeTrainingError(str(exc), self.epoch + 1, self.minibatch) from exc
        if not np.isfinite(rep.total):
            raise EnvelopeTrainingError("non-finite penalty loss", self.epoch + 1, self.minibatch)
        grads = add_weight_decay(grads, self.params, cfg.lam)
        self.params, self.adam = adam_step(self.params, grads, self.adam, cfg.learning_rate)
        self.minibatch += 1

    def loss_on(self, params, rows) -> tuple[float, float]:
        v = mlp_forward(params, self.x[rows])[:, 0]
        rep, _ = penalty_loss(v, self.returns[rows], self.config.K)
        return rep.total, rep.violation_count / len(rows)

    def end_epoch(self) -> None:
        self.epoch += 1
        self.minibatch = 0
        train_loss, viol = self.loss_on(self.params, self.train_idx)
        if not np.isfinite(train_loss):
            raise EnvelopeTrainingError("non-finite training loss", self.epoch, None)
        val_loss = float("nan")
        if self.val_idx is not None and self.config.early_stopping:
            val_loss, _ = self.loss_on(self.params, self.val_idx)
            self.history.append((self.epoch, val_loss))
            if val_loss < self.best_val:
                self.best_val = val_loss
                self.best = self.params.copy()
                self.bad_epochs = 0
            elif val_loss > self.best_val:
                self.bad_epochs += 1
                if self.bad_epochs >= self.config.patience:
                    self.params = self.best.copy()
                    self.bad_epochs = 0
                    self.trace.resets.append(self.epoch)
            else:
                self.bad_epochs = 0
        elif self.val_idx is not None:
            val_loss, _ = self.loss_on(self.params, self.val_idx)
            self.history.append((self.epoch, val_loss))
        self.trace.epochs.append(self.epoch)
        self.trace.train_loss.append(train_loss)
        self.trace.val_loss.append(val_loss)
        self.trace.violation_fraction.append(viol)

    def minibatches(self, rng):
        perm = self.train_idx[rng.permutation(len(self.train_idx))]
        mb = self.config.minibatch_size
        for start in range(0, len(perm), mb):
            yield perm[start:start + mb]

    def result(self) -> UpperEnvelope:
        use_best = self.config.early_stopping and self.val_idx is not None and self.history
        best = self.best if use_best else self.params
        return UpperEnvelope(best.copy(), self.params.copy(), self.config, list(self.history),
                             self.shift, self.scale)


def _fit(states, returns, config, train_idx, val_idx):
    trainer = EnvelopeTrainer(states, returns, config, train_idx, val_idx)
    for epoch in range(config.max_epochs):
        rng = derive_rng(config.seed, "envelope", "shuffle", epoch)
        for rows in trainer.minibatches(rng):
            trainer.step(rows)
        trainer.end_epoch()
    return trainer.result(), trainer.trace


def train_upper_envelope(batch, returns, split, config: EnvelopeConfig):
    """Fit ``V`` on the training split with validation-based early stopping.

    ``batch`` may be a :class:`~bail.dataset.Batch` or a state matrix;
    ``returns`` a :class:`~bail.dataset.ReturnsTable` or a vector.
    Returns ``(UpperEnvelope, TrainTrace)``.
    """
    states = _states_of(batch)
    if len(_returns_of(returns)) != len(states):
        raise ShapeError("returns not aligned with batch")
    return _fit(states, returns, config, split.train_indices, split.validation_indices)


def _fit_all(batch, returns, config):
    states = _states_of(batch)
    return _fit(states, returns, config, np.arange(len(states)), None)


def train_with_l2_sweep(batch, returns, lambdas, config: EnvelopeConfig):
    """One envelope per weight-penalty value, no early stopping, shared init."""
    lambdas = [float(x) for x in lambdas]
    if any(x < 0 for x in lambdas) or lambdas != sorted(lambdas):
        raise ValueError("lambdas must be non-negative and ascending")
    out = []
    for lam in lambdas:
        env, _ = _fit_all(batch, returns, replace(config, lam=lam, early_stopping=False))
        out.append((lam, env))
    return out


def total_violation(values, returns) -> float:
    """``sum(max(0, G - V)**2)``."""
    gap = np.maximum(0.0, _returns_of(returns) - np.asarray(values, dtype=np.float64).ravel())
    return float(np.sum(gap * gap))


def penalty_k_sweep(batch, returns, ks, config: EnvelopeConfig):
    """Constraint violation after full training for each penalty coefficient."""
    ks = [float(k) for k in ks]
    if any(k < 1 for k in ks) or ks != sorted(ks):
        raise ValueError("ks must be >= 1 and ascending")
    states = _states_of(batch)
    out = []
    for k in ks:
        env, _ = _fit_all(states, returns, replace(config, K=k, early_stopping=False))
        out.append((k, total_violation(envelope_value(env, states), returns)))
    return out


# --------------------------------------------------------------------------
# checkpoints

_U32 = struct.Struct("<I")


def _json_floats(a):
    return None if a is None else [float(v) for v in np.asarray(a).ravel()]


def save_envelope(envelope: UpperEnvelope, path) -> None:
    meta = {
        "config": asdict(envelope.config),
        "validation_history": [[int(e), float(v)] for e, v in envelope.validation_history],
        "input_shift": _json_floats(envelope.input_shift),
        "input_scale": _json_floats(envelope.input_scale),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ENVELOPE_MAGIC)
        fh.write(_U32.pack(ENVELOPE_VERSION))
        fh.write(_U32.pack(2))
        fh.write(params_to_bytes(envelope.params))
        fh.write(params_to_bytes(envelope.final_train_params, include_sizes=False))
        fh.write(_U32.pack(len(blob)))
        fh.write(blob)


def load_envelope(path) -> UpperEnvelope:
    buf = Path(path).read_bytes()
    if buf[:8] != ENVELOPE_MAGIC:
        raise CheckpointError(f"{path}: not an envelope checkpoint")
    try:
        version, = _U32.unpack_from(buf, 8)
        if version != ENVELOPE_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {ENVELOPE_VERSION}")
        n_sets, = _U32.unpack_from(buf, 12)
        sizes, pos = read_layer_sizes(buf, 16)
        best, pos = params_from_buffer(buf, pos, sizes)
        final = best
        if n_sets > 1:
            final, pos = params_from_buffer(buf, pos, sizes)
        jlen, = _U32.unpack_from(buf, pos)
        pos += 4
        if len(buf) < pos + jlen:
            raise EOFError("config JSON cut short")
        meta = json.loads(buf[pos:pos + jlen].decode("utf-8"))
    except (struct.error, EOFError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    arr = lambda v: None if v is None else np.array(v, dtype=np.float64)  # noqa: E731
    return UpperEnvelope(best, final, EnvelopeConfig.from_dict(meta["config"]),
                         [(int(e), float(v)) for e, v in meta["validation_history"]],
                         arr(meta["input_shift"]), arr(meta["input_scale"]))
