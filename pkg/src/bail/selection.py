"""Pick the best state-action pairs as the top ``p%`` under a ranking key.

Keys are ``G / V`` (ratio), ``G - V`` (difference) or ``G`` itself. The
``n = ceil(p/100 * m)`` largest keys are kept, ties going to the smaller
index, so the selected fraction is exact even when keys repeat.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from bail.dataset import selection_size

RULES = ("ratio", "difference", "top_g")
MIN_ENVELOPE_VALUE = 1e-9


class NonPositiveEnvelope(ValueError):
    """Ratio keys are meaningless when some ``V(s) <= 0``; use the difference rule."""


@dataclass
class SelectionResult:
    indices: np.ndarray
    threshold_x: float
    rule: str
    p_percent: float
    keys: np.ndarray | None = None

    def __len__(self):
        return len(self.indices)

    def to_csv(self, path) -> None:
        if self.keys is None:
            raise ValueError("selection carries no keys to export")
        chosen = np.zeros(len(self.keys), dtype=bool)
        chosen[self.indices] = True
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "key", "selected", "rule", "x", "p"])
            for i, (k, c) in enumerate(zip(self.keys, chosen)):
                w.writerow([i, repr(float(k)), int(c), self.rule, repr(self.threshold_x),
                            repr(float(self.p_percent))])


def _top(keys: np.ndarray, p_percent: float):
    n = selection_size(p_percent, len(keys))
    # stable sort on -key: equal keys keep index order
    order = np.argsort(-keys, kind="stable")
    chosen = order[:n]
    return np.sort(chosen), float(keys[order[n - 1]])


def _pair(returns, values):
    g = np.asarray(returns, dtype=np.float64).ravel()
    v = np.asarray(values, dtype=np.float64).ravel()
    if g.shape != v.shape:
        raise ValueError(f"returns {g.shape} and values {v.shape} differ in length")
    if g.size == 0:
        raise ValueError("nothing to select from")
    return g, v


def select_ratio(returns, values, p_percent) -> SelectionResult:
    g, v = _pair(returns, values)
    if np.any(v <= MIN_ENVELOPE_VALUE):
        raise NonPositiveEnvelope(
            f"{int(np.sum(v <= MIN_ENVELOPE_VALUE))} envelope values <= {MIN_ENVELOPE_VALUE}; "
            "ratio selection needs V(s) > 0, use the difference rule"
        )
    keys = g / v
    idx, x = _top(keys, p_percent)
    return SelectionResult(idx, x, "ratio", float(p_percent), keys)


def select_difference(returns, values, p_percent) -> SelectionResult:
    g, v = _pair(returns, values)
    keys = g - v
    idx, kth = _top(keys, p_percent)
    # G >= V - x holds for every selected point
    return SelectionResult(idx, -kth, "difference", float(p_percent), keys)


def select_top_returns(returns, p_percent) -> SelectionResult:
    g = np.asarray(returns, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("nothing to select from")
    idx, kth = _top(g, p_percent)
    return SelectionResult(idx, kth, "top_g", float(p_percent), g)


def select(returns, values, p_percent, rule: str = "auto") -> SelectionResult:
    """Dispatch by rule name; ``auto`` is ratio unless some ``V <= 0``, then difference."""
    if rule == "auto":
        v = np.asarray(values, dtype=np.float64)
        rule = "ratio" if np.all(v > MIN_ENVELOPE_VALUE) else "difference"
    if rule == "ratio":
        return select_ratio(returns, values, p_percent)
    if rule == "difference":
        return select_difference(returns, values, p_percent)
    if rule == "top_g":
        return select_top_returns(returns, p_percent)
    raise ValueError(f"unknown selection rule {rule!r}")
