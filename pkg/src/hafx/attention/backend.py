"""Streaming linear-attention hot kernel with numba/numpy backends.

The streaming form keeps a fixed-size accumulator pair (S: F x d_v, z: F)
and touches each token once, so auxiliary memory is independent of T.
Backend selection: env var HAFX_BACKEND set to "numpy" forces the pure-numpy
fallback; anything else (or unset) uses the numba-jitted kernel when numba
imports cleanly.
"""

import os

import numpy as np


def _stream_la_py(phi_q, phi_k, v, eps):
    T, F = phi_q.shape
    d_v = v.shape[1]
    S = np.zeros((F, d_v))
    z = np.zeros(F)
    out = np.empty((T, d_v))
    guards = 0
    for t in range(T):
        z += phi_k[t]
        S += np.outer(phi_k[t], v[t])
        den = float(phi_q[t] @ z)
        if den < eps:
            den = eps
            guards += 1
        out[t] = (phi_q[t] @ S) / den
    return out, guards


_FORCE_NUMPY = os.environ.get("HAFX_BACKEND", "").lower() == "numpy"

if not _FORCE_NUMPY:
    try:
        from numba import njit

        _stream_la_jit = njit(cache=True)(_stream_la_py)
        BACKEND = "numba"
    except ImportError:
        _stream_la_jit = None
        BACKEND = "numpy"
else:
    _stream_la_jit = None
    BACKEND = "numpy"


def streaming_state_bytes(d_prime2, d_v, itemsize=8):
    """Auxiliary accumulator footprint: S (F x d_v) plus z (F); T-free."""
    return (d_prime2 * d_v + d_prime2) * itemsize


def linear_attention_streaming(phi_q, phi_k, v, eps=1e-6):
    """Single-pass normalised linear attention.

    Returns (out: T x d_v, guard_count) where guard_count is the number of
    positions whose denominator was clamped to eps.
    """
    phi_q = np.ascontiguousarray(phi_q, dtype=np.float64)
    phi_k = np.ascontiguousarray(phi_k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if BACKEND == "numba":
        return _stream_la_jit(phi_q, phi_k, v, eps)
    return _stream_la_py(phi_q, phi_k, v, eps)


def softmax_attention_full_np(q, k, v):
    """Plain-numpy causal softmax attention that materialises the T x T
    score matrix; the quadratic reference path for the scaling benchmark."""
    T, d = q.shape
    scores = (q @ k.T) / np.sqrt(d)
    mask = np.tril(np.ones((T, T), dtype=bool))
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v
