"""Dense ReLU MLPs with hand-written backprop, Adam, and the training losses.

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
Hidden layers use ReLU (subgradient 0 at 0); the output layer is linear.
Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bail import kernels


class ShapeError(ValueError):
    """Array shapes do not chain through the network."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached a place that requires finite numbers."""


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"bad layer sizes {self.layer_sizes}")
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError(
                f"{len(self.weights)} weight / {len(self.biases)} bias arrays "
                f"for {n_layers} layers"
            )
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ShapeError(
                    f"layer {k}: weight {w.shape} bias {b.shape}, expected {want} and {(want[1],)}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(list(self.layer_sizes), arrays[0::2], arrays[1::2])

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def weight_sq_norm(self) -> float:
        return float(sum(np.sum(w * w) for w in self.weights))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equals(self, other: "MlpParams") -> bool:
        return self.layer_sizes == other.layer_sizes and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def init_mlp(layer_sizes, rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(list(layer_sizes), weights, biases)


def _check_inputs(params: MlpParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(
            f"inputs of shape {np.shape(inputs)} do not match input dim {params.layer_sizes[0]}"
        )
    return x


def _forward_cached(params: MlpParams, x: np.ndarray):
    acts = [x]
    h = x
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mlp_forward(params: MlpParams, inputs) -> np.ndarray:
    """Network output, shape ``[n, out_dim]``."""
    x = _check_inputs(params, inputs)
    return _forward_cached(params, x)[-1]


def _backward(params: MlpParams, acts, upstream: np.ndarray) -> MlpParams:
    grad_w = [None] * params.n_layers
    grad_b = [None] * params.n_layers
    delta = upstream
    for k in range(params.n_layers - 1, -1, -1):
        grad_w[k] = acts[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ params.weights[k].T
            delta = delta * (acts[k] > 0.0)
    return MlpParams(list(params.layer_sizes), grad_w, grad_b)


def mlp_gradient(params: MlpParams, inputs, per_output_loss_grad) -> MlpParams:
    """Parameter gradient of ``sum(per_output_loss_grad * mlp_forward(inputs))``.

    ``per_output_loss_grad`` is dL/d(output) for each row, shape ``[n, out_dim]``.
    """
    x = _check_inputs(params, inputs)
    up = np.asarray(per_output_loss_grad, dtype=np.float64)
    if up.ndim == 1:
        up = up.reshape(-1, 1)
    if up.shape != (x.shape[0], params.layer_sizes[-1]):
        raise ShapeError(
            f"upstream gradient {up.shape} does not match output {(x.shape[0], params.layer_sizes[-1])}"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(up))):
        raise NonFiniteError("non-finite inputs or upstream gradient")
    return _backward(params, _forward_cached(params, x), up)


def forward_and_gradient(params: MlpParams, inputs, loss_grad_fn):
    """One forward pass, then backprop of ``loss_grad_fn(outputs)``.

    ``loss_grad_fn`` maps outputs to ``(anything, dL/doutputs)``; returns
    ``(outputs, anything, grads)``. Saves the duplicate forward pass of
    calling ``mlp_forward`` then ``mlp_gradient``.
    """
    x = _check_inputs(params, inputs)
    acts = _forward_cached(params, x)
    extra, up = loss_grad_fn(acts[-1])
    up = np.asarray(up, dtype=np.float64).reshape(acts[-1].shape)
    if not np.all(np.isfinite(up)):
        raise NonFiniteError("non-finite loss gradient")
    return acts[-1], extra, _backward(params, acts, up)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step_count: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(0, zeros, [z.copy() for z in zeros], beta1, beta2, epsilon)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, learning_rate: float):
    """Bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if grads.layer_sizes != params.layer_sizes:
        raise ShapeError("gradient shapes do not match parameters")
    g_arrays = grads.arrays()
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient entries")
    t = state.step_count + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), g_arrays, state.first_moment, state.second_moment):
        p2, m2, v2 = kernels.adam_update(
            p, g, m, v, float(learning_rate), state.beta1, state.beta2, state.epsilon, bias1, bias2
        )
        new_p.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    new_state = AdamState(t, new_m, new_v, state.beta1, state.beta2, state.epsilon)
    return params.with_arrays(new_p), new_state


# --------------------------------------------------------------------------
# Losses


@dataclass
class LossReport:
    total: float
    per_point: np.ndarray
    violation_count: int
    regularization: float = 0.0


def penalty_loss(values, returns, K: float, params: MlpParams | None = None, lam: float = 0.0):
    """Asymmetric squared loss that charges ``K`` times more below the returns.

    Per point: ``(V - G)**2`` when ``V >= G`` else ``K * (V - G)**2``; plus
    ``lam * ||w||**2`` over weight matrices (biases excluded) when ``params``
    is given. Returns ``(LossReport, dL/dV)``; the regularizer's parameter
    gradient is applied separately with :func:`add_weight_decay`.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    g = np.asarray(returns, dtype=np.float64).ravel()
    if v.shape != g.shape:
        raise ShapeError(f"values {v.shape} vs returns {g.shape}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    per_point, grad, violations = kernels.penalty_terms(v, g, float(K))
    reg = lam * params.weight_sq_norm() if (params is not None and lam > 0) else 0.0
    total = float(per_point.sum()) + reg
    return LossReport(total, per_point, int(violations), reg), grad


def add_weight_decay(grads: MlpParams, params: MlpParams, lam: float) -> MlpParams:
    """Add the gradient of ``lam * ||w||**2`` (weights only) to ``grads``."""
    if lam == 0:
        return grads
    weights = [gw + 2.0 * lam * w for gw, w in zip(grads.weights, params.weights)]
    return MlpParams(list(grads.layer_sizes), weights, [b.copy() for b in grads.biases])


def mse_loss(predictions, targets):
    """Sum of squared differences and its gradient ``2 * (pred - target)``."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"predictions {p.shape} vs targets {t.shape}")
    d = p - t
    return float(np.sum(d * d)), 2.0 * d


@dataclass
class Squash:
    """Affine-tanh map from raw network outputs onto a box ``[low, high]``."""

    low: np.ndarray
    high: np.ndarray
    mid: np.ndarray = field(init=False)
    half: np.ndarray = field(init=False)

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64).ravel()
        self.high = np.asarray(self.high, dtype=np.float64).ravel()
        if not np.all(self.low < self.high):
            raise ValueError("action bounds need low < high elementwise")
        self.mid = 0.5 * (self.high + self.low)
        self.half = 0.5 * (self.high - self.low)

    def __call__(self, raw):
        return self.mid + self.half * np.tanh(raw)

    def backward(self, raw, upstream):
        t = np.tanh(raw)
        return upstream * self.half * (1.0 - t * t)


# --------------------------------------------------------------------------
# Binary payloads for checkpoints: u32 n_sizes, u32 * n_sizes, then f64
# arrays W0, b0, W1, b1, ... in C order. All little-endian.


def params_to_bytes(params: MlpParams, include_sizes: bool = True) -> bytes:
    head = b""
    if include_sizes:
        sizes = np.asarray(params.layer_sizes, dtype="<u4")
        head = np.uint32(len(sizes)).astype("<u4").tobytes() + sizes.tobytes()
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())


def payload_size(layer_sizes) -> int:
    return 8 * sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


def read_layer_sizes(buf: bytes, pos: int):
    if len(buf) < pos + 4:
        raise EOFError("layer-size header cut short")
    n = int(np.frombuffer(buf, "<u4", 1, pos)[0])
    pos += 4
    if len(buf) < pos + 4 * n:
        raise EOFError("layer sizes cut short")
    sizes = [int(v) for v in np.frombuffer(buf, "<u4", n, pos)]
    return sizes, pos + 4 * n


def params_from_buffer(buf: bytes, pos: int, layer_sizes):
    """Decode one parameter block at ``pos``; returns ``(params, new_pos)``."""
    if len(buf) < pos + payload_size(layer_sizes):
        raise EOFError("parameter payload cut short")
    arrays = []
    for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = np.frombuffer(buf, "<f8", i * o, pos).reshape(i, o).astype(np.float64)
        pos += 8 * i * o
        b = np.frombuffer(buf, "<f8", o, pos).astype(np.float64)
        pos += 8 * o
        arrays += [w, b]
    return MlpParams(list(layer_sizes), arrays[0::2], arrays[1::2]), pos
