"""Hot numeric loops, each in a numba-jitted and a pure-numpy flavour.

The public names (``discounted_returns``, ``augmentation_tail``,
``penalty_terms``, ``adam_update``) dispatch to the numba versions unless
``BAIL_DISABLE_NUMBA`` is set. Both flavours perform the same floating-point
operations in the same order, so results agree bit-for-bit.

Episodes are described by two int64 arrays, ``starts`` and ``lengths``, over
flat per-transition arrays.
"""

import math

import numpy as np

from bail._accel import USE_NUMBA, jit

# --------------------------------------------------------------------------
# Discounted Monte Carlo returns


def _discounted_returns_py(rewards, starts, lengths, gamma):
    out = np.empty(rewards.shape[0], dtype=np.float64)
    for e in range(starts.shape[0]):
        s = starts[e]
        g = 0.0
        for k in range(lengths[e] - 1, -1, -1):
            g = rewards[s + k] + gamma * g
            out[s + k] = g
    return out


def discounted_returns_numpy(rewards, starts, lengths, gamma):
    out = np.empty(rewards.shape[0], dtype=np.float64)
    # Walk all episodes in lock-step from their ends, one vector op per step.
    lengths = np.asarray(lengths, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    if lengths.size == 0:
        return out
    g = np.zeros(lengths.size, dtype=np.float64)
    for back in range(int(lengths.max())):
        live = lengths > back
        idx = starts[live] + lengths[live] - 1 - back
        g[live] = rewards[idx] + gamma * g[live]
        out[idx] = g[live]
    return out


# --------------------------------------------------------------------------
# Augmented-return tail term


def _augmentation_tail_py(states, next_last, plain, starts, lengths, truncated,
                          gamma, time_cap, min_window):
    """Extra discounted tail added to each return of a truncated episode.

    For in-episode position i (1-based) the candidate window is the first
    ``max(time_cap - i, min_window)`` states of the episode (capped at its
    length); ``j`` is the earliest state in the window closest to the
    episode's final next-state, and the tail is ``gamma**(n-i+1) * G_j``.
    """
    m = states.shape[0]
    dim = states.shape[1]
    tail = np.zeros(m, dtype=np.float64)
    nearest = np.full(m, -1, dtype=np.int64)
    for e in range(starts.shape[0]):
        if not truncated[e]:
            continue
        s0 = starts[e]
        n = lengths[e]
        # prefix_arg[w-1] = earliest argmin over the first w states
        prefix_arg = np.empty(n, dtype=np.int64)
        best = np.inf
        best_k = 0
        for k in range(n):
            d = 0.0
            for c in range(dim):
                diff = states[s0 + k, c] - next_last[e, c]
                d += diff * diff
            if d < best:
                best = d
                best_k = k
            prefix_arg[k] = best_k
        for k in range(n):
            i = k + 1
            w = time_cap - i
            if w < min_window:
                w = min_window
            if w > n:
                w = n
            if w < 1:
                w = 1
            j = prefix_arg[w - 1]
            nearest[s0 + k] = j
            tail[s0 + k] = gamma ** float(n - i + 1) * plain[s0 + j]
    return tail, nearest


def augmentation_tail_numpy(states, next_last, plain, starts, lengths, truncated,
                            gamma, time_cap, min_window):
    m = states.shape[0]
    tail = np.zeros(m, dtype=np.float64)
    nearest = np.full(m, -1, dtype=np.int64)
    for e in np.flatnonzero(truncated):
        s0, n = int(starts[e]), int(lengths[e])
        diff = states[s0:s0 + n] - next_last[e]
        d = np.zeros(n, dtype=np.float64)
        for c in range(states.shape[1]):
            d = d + diff[:, c] * diff[:, c]
        running = np.minimum.accumulate(d)
        # earliest index at which each running minimum was first attained
        is_new = np.empty(n, dtype=bool)
        is_new[0] = True
        is_new[1:] = d[1:] < running[:-1]
        prefix_arg = np.maximum.accumulate(np.where(is_new, np.arange(n), 0))
        i = np.arange(1, n + 1)
        w = np.clip(np.maximum(time_cap - i, min_window), 1, n)
        j = prefix_arg[w - 1]
        nearest[s0:s0 + n] = j
        powers = np.array([gamma ** float(n - ii + 1) for ii in i])
        tail[s0:s0 + n] = powers * plain[s0 + j]
    return tail, nearest


# --------------------------------------------------------------------------
# Penalty loss


def _penalty_terms_py(values, returns, K):
    n = values.shape[0]
    per_point = np.empty(n, dtype=np.float64)
    grad = np.empty(n, dtype=np.float64)
    violations = 0
    for i in range(n):
        r = values[i] - returns[i]
        if values[i] >= returns[i]:
            per_point[i] = r * r
            grad[i] = 2.0 * r
        else:
            per_point[i] = K * (r * r)
            grad[i] = 2.0 * K * r
            violations += 1
    return per_point, grad, violations


def penalty_terms_numpy(values, returns, K):
    r = values - returns
    below = values < returns
    per_point = np.where(below, K * (r * r), r * r)
    grad = np.where(below, 2.0 * K * r, 2.0 * r)
    return per_point, grad, int(np.count_nonzero(below))


# --------------------------------------------------------------------------
# Adam


def _adam_update_py(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2):
    flat_p = p.ravel()
    flat_g = g.ravel()
    flat_m = m.ravel()
    flat_v = v.ravel()
    new_p = np.empty_like(flat_p)
    new_m = np.empty_like(flat_m)
    new_v = np.empty_like(flat_v)
    for k in range(flat_p.shape[0]):
        gk = flat_g[k]
        mk = beta1 * flat_m[k] + (1.0 - beta1) * gk
        vk = beta2 * flat_v[k] + (1.0 - beta2) * (gk * gk)
        new_m[k] = mk
        new_v[k] = vk
        new_p[k] = flat_p[k] - lr * (mk / bias1) / (math.sqrt(vk / bias2) + eps)
    return new_p.reshape(p.shape), new_m.reshape(m.shape), new_v.reshape(v.shape)


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2):
    new_m = beta1 * m + (1.0 - beta1) * g
    new_v = beta2 * v + (1.0 - beta2) * (g * g)
    new_p = p - lr * (new_m / bias1) / (np.sqrt(new_v / bias2) + eps)
    return new_p, new_m, new_v


discounted_returns_numba = jit(_discounted_returns_py)
augmentation_tail_numba = jit(_augmentation_tail_py)
penalty_terms_numba = jit(_penalty_terms_py)
adam_update_numba = jit(_adam_update_py)

if USE_NUMBA:
    discounted_returns = discounted_returns_numba
    augmentation_tail = augmentation_tail_numba
    penalty_terms = penalty_terms_numba
    adam_update = adam_update_numba
else:
    discounted_returns = discounted_returns_numpy
    augmentation_tail = augmentation_tail_numpy
    penalty_terms = penalty_terms_numpy
    adam_update = adam_update_numpy
