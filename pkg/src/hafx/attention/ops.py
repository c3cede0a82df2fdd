"""Differentiable attention kernels: causal softmax, sliding-window softmax,
attention sinks, feature-mapped linear attention, RoPE, and the hybrid
combiner with its ablation modes.

All kernels take tensors shaped (..., T, d) and are pure functions, so
batched/multi-head evaluation is just broadcasting. The streaming O(T)
linear-attention path lives in `backend`; the masked kernel-matrix form here
is the differentiable training path and is held to agree with it.
"""

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..tensor import Tensor, concat, row_softmax

MASK_NEG = -1e30  # additive mask; underflows to exact 0 after softmax shift
LA_EPS = 1e-6  # denominator guard for linear-attention normalisation

# Count of positions whose LA denominator was clamped, keyed for diagnostics.
_GUARD_COUNT = 0


def reset_guard_count():
    global _GUARD_COUNT
    _GUARD_COUNT = 0


def guard_count():
    return _GUARD_COUNT


def _note_guards(n):
    global _GUARD_COUNT
    _GUARD_COUNT += int(n)


class Activation(enum.Enum):
    SOFTMAX = "softmax"
    EXPONENTIAL = "exponential"
    RELU = "relu"
    ONE_PLUS_ELU = "one_plus_elu"
    NONE = "none"


class AblationMode(enum.Enum):
    FULL_HYBRID = "full_hybrid"
    SWA_ONLY = "swa_only"
    LA_ONLY = "la_only"
    SINKS_ONLY = "sinks_only"
    NO_ATTENTION = "no_attention"
    HYBRID_OVERLAP = "hybrid_overlap"


@dataclass
class FeatureMapParams:
    """Learnable map producing non-negative features of width 2*d_prime."""

    w: Tensor  # (h_d, d_prime)
    b: Tensor  # (d_prime,)
    activation: Activation = Activation.SOFTMAX

    @property
    def d_prime(self):
        return self.w.shape[1]

    def tensors(self):
        return {"w": self.w, "b": self.b}


@dataclass
class WindowSpec:
    window: int = 64
    sink_count: int = 8

    def __post_init__(self):
        if self.window < 1:
            raise ShapeError("window must be >= 1")
        if self.sink_count < 0:
            raise ShapeError("sink_count must be >= 0")


@dataclass
class HybridSpec:
    g: float = 0.5  # a = g*1, b = (1-g)*1
    overlap: bool = False

    def __post_init__(self):
        if not 0.0 <= self.g <= 1.0:
            raise ShapeError("mixing scalar g must lie in [0, 1]")


@dataclass
class RoPEParams:
    base: float = 10000.0
    head_dim: int = 16

    def __post_init__(self):
        if self.head_dim % 2:
            raise ShapeError("RoPE head dimension must be even")


# -- masks -------------------------------------------------------------------


def causal_additive_mask(T):
    m = np.zeros((T, T))
    m[np.triu_indices(T, k=1)] = MASK_NEG
    return m


def band_additive_mask(T, window):
    t = np.arange(T)
    allowed = (t[None, :] <= t[:, None]) & (t[None, :] >= t[:, None] - window + 1)
    return np.where(allowed, 0.0, MASK_NEG)


def sinks_additive_mask(T, sink_count):
    t = np.arange(T)
    allowed = (t[None, :] <= t[:, None]) & (t[None, :] < sink_count)
    return np.where(allowed, 0.0, MASK_NEG)


def causal_mult_mask(T):
    return np.tril(np.ones((T, T)))


def lagged_mult_mask(T, window):
    """Keys strictly outside the sliding window: i <= t - window (0-based)."""
    t = np.arange(T)
    return (t[None, :] <= t[:, None] - window).astype(np.float64)


# -- kernels -----------------------------------------------------------------


def apply_rope(x, params, pos_offset=0):
    """Rotate query/key pairs by position-dependent angles; norm-preserving."""
    h_d = x.shape[-1]
    if h_d % 2:
        raise ShapeError("apply_rope requires an even head dimension")
    T = x.shape[-2]
    half = h_d // 2
    inv_freq = params.base ** (-np.arange(half) / half)
    angles = np.outer(np.arange(pos_offset, pos_offset + T), inv_freq)
    cos = np.cos(angles)
    sin = np.sin(angles)
    x1 = x[..., :half]
    x2 = x[..., half:]
    return concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def softmax_attention_causal(q, k, v, additive_mask=None):
    T, d = q.shape[-2], q.shape[-1]
    if T == 0:
        raise ShapeError("attention over an empty sequence")
    if additive_mask is None:
        additive_mask = causal_additive_mask(T)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d)) + Tensor(additive_mask)
    return row_softmax(scores) @ v


def sliding_window_attention(q, k, v, window):
    T = q.shape[-2]
    return softmax_attention_causal(q, k, v, band_additive_mask(T, window))


def sinks_attention(q, k, v, sink_count):
    if sink_count < 1:
        raise ShapeError("sinks_attention requires sink_count >= 1")
    T = q.shape[-2]
    return softmax_attention_causal(q, k, v, sinks_additive_mask(T, sink_count))


def feature_map_apply(params, x):
    """phi(x) = sigma(W^T x + b) ++ sigma(-W^T x - b), width 2*d_prime."""
    z = x @ params.w + params.b
    act = params.activation
    if act is Activation.SOFTMAX:
        pos, neg = row_softmax(z), row_softmax(-z)
    elif act is Activation.EXPONENTIAL:
        pos, neg = z.exp(), (-z).exp()
    elif act is Activation.RELU:
        pos, neg = z.relu(), (-z).relu()
    elif act is Activation.ONE_PLUS_ELU:
        pos, neg = z.elu() + 1.0, (-z).elu() + 1.0
    elif act is Activation.NONE:
        warnings.warn(
            "feature map without activation can emit negative features",
            RuntimeWarning,
            stacklevel=2,
        )
        pos, neg = z, -z
    else:  # pragma: no cover
        raise ValueError(f"unknown activation {act}")
    return concat([pos, neg], axis=-1)


def linear_attention_masked(phi_q, phi_k, v, mult_mask, eps=LA_EPS):
    """Normalised linear attention via a masked kernel matrix.

    Differentiable path; mathematically identical to the streaming form but
    keeps the (T, T) kernel so gradients are plain matmuls. Denominators
    below eps are clamped and counted.
    """
    kernel = (phi_q @ phi_k.swapaxes(-1, -2)) * Tensor(mult_mask)
    num = kernel @ v
    den = kernel.sum(axis=-1, keepdims=True)
    _note_guards(np.count_nonzero(den.data < eps))
    return num / den.clamp_min(eps)


def linear_attention_causal(phi_q, phi_k, v, eps=LA_EPS):
    T = phi_q.shape[-2]
    return linear_attention_masked(phi_q, phi_k, v, causal_mult_mask(T), eps)


def linear_attention_quadratic_oracle(phi_q, phi_k, v, eps=LA_EPS):
    """Reference form over the explicit causal kernel matrix (plain numpy)."""
    phi_q = np.asarray(phi_q, dtype=np.float64)
    phi_k = np.asarray(phi_k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    T = phi_q.shape[0]
    kernel = (phi_q @ phi_k.T) * np.tril(np.ones((T, T)))
    den = kernel.sum(axis=-1, keepdims=True)
    den = np.maximum(den, eps)
    return (kernel @ v) / den


def hybrid_attention(q, k, v, phi, win, hy, mode, return_branches=False):
    """a (.) SWA + b (.) LA with a = g*1, b = (1-g)*1, plus ablation modes.

    q and k are expected post-RoPE; the SWA branch consumes them raw while
    the LA branch consumes phi(q), phi(k). In non-overlap mode the LA branch
    only sees keys outside the sliding window (empty context -> exact zero).
    """
    T, d_v = q.shape[-2], v.shape[-1]
    zeros = Tensor(np.zeros(v.shape[:-2] + (T, d_v)))

    if mode is AblationMode.NO_ATTENTION:
        out = zeros
        return (out, zeros, zeros) if return_branches else out
    if mode is AblationMode.SINKS_ONLY:
        out = sinks_attention(q, k, v, win.sink_count)
        return (out, zeros, zeros) if return_branches else out

    g = hy.g
    swa_branch = zeros
    la_branch = zeros
    if mode in (AblationMode.FULL_HYBRID, AblationMode.SWA_ONLY, AblationMode.HYBRID_OVERLAP):
        swa_branch = sliding_window_attention(q, k, v, win.window)
    if mode in (AblationMode.FULL_HYBRID, AblationMode.LA_ONLY, AblationMode.HYBRID_OVERLAP):
        overlap = hy.overlap or mode is AblationMode.HYBRID_OVERLAP
        mask = causal_mult_mask(T) if overlap else lagged_mult_mask(T, win.window)
        phi_q = feature_map_apply(phi, q)
        phi_k = feature_map_apply(phi, k)
        la_branch = linear_attention_masked(phi_q, phi_k, v, mask)

    out = g * swa_branch + (1.0 - g) * la_branch
    return (out, swa_branch, la_branch) if return_branches else out
