"""Numeric inner loops, in two interchangeable implementations.

Every kernel exists as an explicit-loop version compiled with numba's
``@njit`` and as a vectorized numpy version. The compiled set is used when
numba imports and ``WFSIZING_NUMBA`` is not set to ``0``/``false``/``off``.
Both sets take and return the same types, so callers never branch on the
backend. ``benchmarks/bench_kernels.py`` times one against the other.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("WFSIZING_NUMBA", "1").strip().lower()

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorate(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorate


USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("0", "false", "off", "no")

# Q-table last axis: IncCpu, DecCpu, IncMem, DecMem, Noop
N_Q_ACTIONS = 5


# ----------------------------------------------------------------------------
# numpy implementations
# ----------------------------------------------------------------------------


def softmax_np(h):
    z = np.exp(h - h.max())
    return z / z.sum()


def sample_index_np(h, u):
    p = softmax_np(h)
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, h.shape[0] - 1)


def preference_step_np(h, chosen, step_adv):
    """In-place gradient-bandit update; ``step_adv`` is alpha * (R - baseline)."""
    p = softmax_np(h)
    h -= step_adv * p
    h[chosen] += step_adv


def masked_argmax_np(row, mask):
    vals = np.where(mask, row, -np.inf)
    return int(np.argmax(vals))


def q_backup_np(q, ci, mi, a, reward, ni, nj, next_mask, eta, gamma):
    nxt = q[ni, nj]
    best_next = float(np.max(np.where(next_mask, nxt, -np.inf)))
    old = q[ci, mi, a]
    new = old + eta * (reward + gamma * best_next - old)
    q[ci, mi, a] = new
    return new


def speedup_curve_np(base, f, max_par, overhead, cpus):
    """Runtime and busy core-seconds for each core count in ``cpus``."""
    p = np.minimum(cpus.astype(np.float64), max_par)
    par_work = base * f * (1.0 + overhead * (p - 1.0))
    runtime = base * (1.0 - f) + par_work / p
    busy = base * (1.0 - f) + par_work
    return runtime, busy


# ----------------------------------------------------------------------------
# loop implementations (compiled when numba is enabled)
# ----------------------------------------------------------------------------


def _softmax_loop(h):
    n = h.shape[0]
    m = h[0]
    for i in range(1, n):
        if h[i] > m:
            m = h[i]
    out = np.empty(n)
    s = 0.0
    for i in range(n):
        out[i] = math.exp(h[i] - m)
        s += out[i]
    for i in range(n):
        out[i] /= s
    return out


def _sample_index_loop(h, u):
    p = _softmax_jit(h)
    acc = 0.0
    n = p.shape[0]
    for i in range(n):
        acc += p[i]
        if u < acc:
            return i
    return n - 1


def _preference_step_loop(h, chosen, step_adv):
    p = _softmax_jit(h)
    for i in range(h.shape[0]):
        h[i] -= step_adv * p[i]
    h[chosen] += step_adv


def _masked_argmax_loop(row, mask):
    best = -1
    best_val = -np.inf
    for i in range(row.shape[0]):
        if mask[i] and (best < 0 or row[i] > best_val):
            best = i
            best_val = row[i]
    return best


def _q_backup_loop(q, ci, mi, a, reward, ni, nj, next_mask, eta, gamma):
    best_next = -np.inf
    for k in range(q.shape[2]):
        if next_mask[k] and q[ni, nj, k] > best_next:
            best_next = q[ni, nj, k]
    old = q[ci, mi, a]
    new = old + eta * (reward + gamma * best_next - old)
    q[ci, mi, a] = new
    return new


def _speedup_curve_loop(base, f, max_par, overhead, cpus):
    n = cpus.shape[0]
    runtime = np.empty(n)
    busy = np.empty(n)
    for i in range(n):
        p = min(float(cpus[i]), max_par)
        par_work = base * f * (1.0 + overhead * (p - 1.0))
        runtime[i] = base * (1.0 - f) + par_work / p
        busy[i] = base * (1.0 - f) + par_work
    return runtime, busy


_softmax_jit = njit(cache=True)(_softmax_loop)
softmax_jit = _softmax_jit
sample_index_jit = njit(cache=True)(_sample_index_loop)
preference_step_jit = njit(cache=True)(_preference_step_loop)
masked_argmax_jit = njit(cache=True)(_masked_argmax_loop)
q_backup_jit = njit(cache=True)(_q_backup_loop)
speedup_curve_jit = njit(cache=True)(_speedup_curve_loop)

NUMPY_BACKEND = {
    "softmax": softmax_np,
    "sample_index": sample_index_np,
    "preference_step": preference_step_np,
    "masked_argmax": masked_argmax_np,
    "q_backup": q_backup_np,
    "speedup_curve": speedup_curve_np,
}
NUMBA_BACKEND = {
    "softmax": softmax_jit,
    "sample_index": sample_index_jit,
    "preference_step": preference_step_jit,
    "masked_argmax": masked_argmax_jit,
    "q_backup": q_backup_jit,
    "speedup_curve": speedup_curve_jit,
}

_active = NUMBA_BACKEND if USE_NUMBA else NUMPY_BACKEND
BACKEND = "numba" if USE_NUMBA else "numpy"

softmax = _active["softmax"]
sample_index = _active["sample_index"]
preference_step = _active["preference_step"]
masked_argmax = _active["masked_argmax"]
q_backup = _active["q_backup"]
speedup_curve = _active["speedup_curve"]
