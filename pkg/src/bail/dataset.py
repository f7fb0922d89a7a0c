"""Episodic transition batches, Monte Carlo returns, splits and persistence.

A :class:`Batch` is stored column-wise (one array per field) rather than as
a list of transition objects; ``batch[i]`` materializes a single
:class:`Transition` when one is wanted.

Batch file layout (little-endian)::

    b"BAILBTCH"  u32 version  u32 state_dim  u32 action_dim  u64 count
    u32 metadata_len  metadata (UTF-8 JSON)
    count x [f64*state_dim state, f64*action_dim action, f64 reward,
             f64*state_dim next_state, u8 flags, u32 episode_id, u32 step_index]

``flags`` bit 0 is *terminated*, bit 1 is *truncated*.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from bail import kernels

BATCH_MAGIC = b"BAILBTCH"
BATCH_VERSION = 1


class BatchError(ValueError):
    """Batch contents violate the episodic layout."""


class BatchFileError(Exception):
    """Base class for batch file problems."""


class BadMagicError(BatchFileError):
    pass


class VersionMismatchError(BatchFileError):
    pass


class TruncatedFileError(BatchFileError):
    pass


class DimensionMismatchError(BatchFileError):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminated: bool
    truncated: bool
    episode_id: int
    step_index: int


def _as_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise BatchError(f"{name} must be 2-D, got shape {a.shape}")
    return a


@dataclass(eq=False)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    episode_id: np.ndarray
    step_index: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = _as_2d(self.states, "states")
        self.actions = _as_2d(self.actions, "actions")
        self.next_states = _as_2d(self.next_states, "next_states")
        self.rewards = np.asarray(self.rewards, dtype=np.float64).ravel()
        self.terminated = np.asarray(self.terminated, dtype=bool).ravel()
        self.truncated = np.asarray(self.truncated, dtype=bool).ravel()
        self.episode_id = np.asarray(self.episode_id, dtype=np.int64).ravel()
        self.step_index = np.asarray(self.step_index, dtype=np.int64).ravel()
        self.metadata = dict(self.metadata)
        m = self.states.shape[0]
        for name in ("actions", "next_states", "rewards", "terminated", "truncated",
                     "episode_id", "step_index"):
            if getattr(self, name).shape[0] != m:
                raise BatchError(f"{name} has {getattr(self, name).shape[0]} rows, states has {m}")
        if self.next_states.shape[1] != self.states.shape[1]:
            raise BatchError("next_states and states differ in dimension")
        self._validate_episodes()

    def _validate_episodes(self):
        if self.m == 0:
            return
        starts, lengths = self.episode_bounds()
        ends = starts + lengths - 1
        flagged = self.terminated | self.truncated
        interior = np.ones(self.m, dtype=bool)
        interior[ends] = False
        if np.any(flagged & interior):
            raise BatchError("terminated/truncated set on a non-final transition")
        if np.any(self.terminated & self.truncated):
            raise BatchError("transition both terminated and truncated")
        expected = np.arange(self.m) - np.repeat(starts, lengths) + 1
        if not np.array_equal(self.step_index, expected):
            raise BatchError("step_index must run 1, 2, ... within each episode")
        if len(np.unique(self.episode_id[starts])) != len(starts):
            raise BatchError("episodes must be contiguous runs of episode_id")
        nxt = np.flatnonzero(interior)
        if not np.array_equal(self.next_states[nxt], self.states[nxt + 1]):
            raise BatchError("next_state does not match the successor's state")

    # ------------------------------------------------------------------

    @property
    def m(self) -> int:
        return int(self.states.shape[0])

    def __len__(self) -> int:
        return self.m

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[1])

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
            self.next_states[i].copy(), bool(self.terminated[i]), bool(self.truncated[i]),
            int(self.episode_id[i]), int(self.step_index[i]),
        )

    @property
    def transitions(self) -> list[Transition]:
        return [self[i] for i in range(self.m)]

    def episode_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Start offsets and lengths of the contiguous episodes."""
        if self.m == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        change = np.flatnonzero(np.diff(self.episode_id) != 0) + 1
        starts = np.concatenate([[0], change]).astype(np.int64)
        lengths = np.diff(np.concatenate([starts, [self.m]])).astype(np.int64)
        return starts, lengths

    @property
    def n_episodes(self) -> int:
        return len(self.episode_bounds()[0])

    def equals(self, other: "Batch") -> bool:
        fields_ = ("states", "actions", "rewards", "next_states", "terminated",
                   "truncated", "episode_id", "step_index")
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in fields_) and (
            self.metadata == other.metadata
        )

    @classmethod
    def from_episodes(cls, episodes, metadata=None) -> "Batch":
        """Concatenate :class:`bail.envs.Episode` objects, numbering them from 0."""
        cols = {k: [] for k in ("s", "a", "r", "sn", "term", "trunc", "ep", "step")}
        for eid, ep in enumerate(episodes):
            n = len(ep.rewards)
            if n == 0:
                continue
            cols["s"].append(ep.states)
            cols["a"].append(ep.actions)
            cols["r"].append(ep.rewards)
            cols["sn"].append(ep.next_states)
            term = np.zeros(n, bool)
            trunc = np.zeros(n, bool)
            term[-1] = ep.terminated
            trunc[-1] = ep.truncated
            cols["term"].append(term)
            cols["trunc"].append(trunc)
            cols["ep"].append(np.full(n, eid, np.int64))
            cols["step"].append(np.arange(1, n + 1, dtype=np.int64))
        if not cols["s"]:
            raise BatchError("no transitions")
        return cls(*(np.concatenate(cols[k]) for k in cols), metadata=metadata or {})


@dataclass
class ReturnsTable:
    returns: np.ndarray
    kind: str
    gamma: float

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=np.float64).ravel()
        if self.kind not in ("plain", "augmented", "oracle"):
            raise ValueError(f"unknown returns kind {self.kind!r}")

    def __len__(self):
        return len(self.returns)

    def to_csv(self, path, batch: Batch):
        if len(batch) != len(self):
            raise ValueError("returns table and batch differ in length")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "episode_id", "step_index", "G"])
            for i, g in enumerate(self.returns):
                w.writerow([i, int(batch.episode_id[i]), int(batch.step_index[i]), repr(float(g))])

    @classmethod
    def from_csv(cls, path, kind="plain", gamma=float("nan")) -> "ReturnsTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["G"]) for r in rows]), kind, gamma)


@dataclass
class SplitIndex:
    train_indices: np.ndarray
    validation_indices: np.ndarray


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")


def compute_returns(batch: Batch, gamma: float) -> ReturnsTable:
    """Discounted reward-to-go within each episode, by one backward pass."""
    _check_gamma(gamma)
    if batch.m == 0:
        raise BatchError("empty batch")
    starts, lengths = batch.episode_bounds()
    g = kernels.discounted_returns(batch.rewards, starts, lengths, float(gamma))
    return ReturnsTable(g, "plain", float(gamma))


def augmentation_window_floor(time_cap: int) -> int:
    return int(math.ceil(0.2 * time_cap))


def compute_augmented_returns(batch: Batch, gamma: float, time_cap: int | None = None) -> ReturnsTable:
    """Plain returns plus a replayed tail for episodes cut off by the time cap.

    For a truncated episode of length ``n`` with final next-state ``s'``, the
    return at in-episode position ``i`` gains ``gamma**(n-i+1) * G_j``, where
    ``j`` is the earliest of the first ``max(time_cap - i, ceil(0.2*time_cap))``
    states nearest to ``s'``. Naturally terminated episodes are left alone.
    ``time_cap`` defaults to ``batch.metadata["time_cap"]``.
    """
    plain = compute_returns(batch, gamma)
    if time_cap is None:
        time_cap = batch.metadata.get("time_cap")
        if time_cap is None:
            raise ValueError("time_cap not given and not in batch metadata")
    time_cap = int(time_cap)
    if time_cap < 1:
        raise ValueError("time_cap must be >= 1")
    starts, lengths = batch.episode_bounds()
    ends = starts + lengths - 1
    tail, nearest = kernels.augmentation_tail(
        batch.states, batch.next_states[ends], plain.returns, starts, lengths,
        batch.truncated[ends], float(gamma), time_cap, augmentation_window_floor(time_cap),
    )
    if np.any(nearest[np.repeat(batch.truncated[ends], lengths)] < 0):
        raise BatchError("empty augmentation window")
    return ReturnsTable(plain.returns + tail, "augmented", float(gamma))


def split_train_validation(batch_or_size, fraction: float = 0.8, seed: int = 0) -> SplitIndex:
    """Uniform random split at transition granularity."""
    m = batch_or_size if isinstance(batch_or_size, (int, np.integer)) else len(batch_or_size)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if m < 5:
        raise BatchError(f"cannot split a batch of {m} transitions")
    n_train = int(round(fraction * m))
    perm = np.random.default_rng(seed).permutation(m)
    return SplitIndex(np.sort(perm[:n_train]), np.sort(perm[n_train:]))


@dataclass
class BatchStats:
    episode_count: int
    mean_return: float
    std_return: float
    episode_returns: np.ndarray


def batch_statistics(batch: Batch) -> BatchStats:
    """Undiscounted episode returns over complete (flagged) episodes."""
    if batch.m == 0:
        raise BatchError("empty batch")
    starts, lengths = batch.episode_bounds()
    ends = starts + lengths - 1
    complete = batch.terminated[ends] | batch.truncated[ends]
    sums = np.add.reduceat(batch.rewards, starts)[complete]
    if sums.size == 0:
        return BatchStats(0, float("nan"), float("nan"), sums)
    return BatchStats(int(sums.size), float(sums.mean()), float(sums.std()), sums)


def selection_size(p_percent: float, m: int) -> int:
    """``ceil(p/100 * m)`` computed exactly on the decimal value of ``p``."""
    if not 0 < p_percent <= 100:
        raise ValueError(f"p_percent must lie in (0, 100], got {p_percent}")
    return int(math.ceil(Fraction(repr(float(p_percent))) * m / 100))


# --------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<IIIQ")
_U32 = struct.Struct("<I")


def _record_dtype(state_dim, action_dim):
    return np.dtype([
        ("s", "<f8", (state_dim,)), ("a", "<f8", (action_dim,)), ("r", "<f8"),
        ("sn", "<f8", (state_dim,)), ("flags", "u1"), ("ep", "<u4"), ("step", "<u4"),
    ])


def save_batch(batch: Batch, path) -> None:
    meta = json.dumps(batch.metadata, sort_keys=True).encode("utf-8")
    rec = np.zeros(batch.m, dtype=_record_dtype(batch.state_dim, batch.action_dim))
    rec["s"] = batch.states
    rec["a"] = batch.actions
    rec["r"] = batch.rewards
    rec["sn"] = batch.next_states
    rec["flags"] = batch.terminated.astype(np.uint8) | (batch.truncated.astype(np.uint8) << 1)
    rec["ep"] = batch.episode_id
    rec["step"] = batch.step_index
    with open(path, "wb") as fh:
        fh.write(BATCH_MAGIC)
        fh.write(_HEADER.pack(BATCH_VERSION, batch.state_dim, batch.action_dim, batch.m))
        fh.write(_U32.pack(len(meta)))
        fh.write(meta)
        fh.write(rec.tobytes())


def load_batch(path) -> Batch:
    data = Path(path).read_bytes()
    if len(data) < len(BATCH_MAGIC):
        raise TruncatedFileError(f"{path}: file too short for a batch header")
    if data[:8] != BATCH_MAGIC:
        raise BadMagicError(f"{path}: not a batch file (magic {data[:8]!r})")
    pos = 8
    if len(data) < pos + _HEADER.size + _U32.size:
        raise TruncatedFileError(f"{path}: header cut short")
    version, sdim, adim, count = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    if version != BATCH_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {BATCH_VERSION}")
    if sdim == 0 or adim == 0:
        raise DimensionMismatchError(f"{path}: zero state or action dimension")
    (mlen,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    if len(data) < pos + mlen:
        raise TruncatedFileError(f"{path}: metadata cut short")
    metadata = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    dt = _record_dtype(sdim, adim)
    want = count * dt.itemsize
    have = len(data) - pos
    if have < want:
        raise TruncatedFileError(f"{path}: {have} payload bytes, expected {want}")
    if have > want:
        raise DimensionMismatchError(
            f"{path}: {have} payload bytes do not fit {count} records of dims ({sdim}, {adim})"
        )
    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    flags = rec["flags"]
    try:
        return Batch(
            rec["s"].copy(), rec["a"].copy(), rec["r"].copy(), rec["sn"].copy(),
            (flags & 1).astype(bool), (flags & 2).astype(bool),
            rec["ep"].astype(np.int64), rec["step"].astype(np.int64), metadata,
        )
    except BatchError as exc:
        raise DimensionMismatchError(f"{path}: inconsistent records: {exc}") from exc
