"""Numerical kernels of one training step.

Every kernel takes an arithmetic provider (see :mod:`bcpnn.precision`), so
the same code runs in native float32/float64 or in an emulated reduced
precision format.  Arrays are row-major with the presynaptic index outermost
(``weights[i, j]``, ``trace_cij[i, j]``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HypercolumnGeometry, LayerPairState
from .plasticity import ConnectivityMask
from .precision import NativeArithmetic

EPS_TRACE = 1e-8

_F64 = NativeArithmetic(np.float64)


def _check_cols(x, n, what):
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"{what}: expected shape (batch, {n}), got {x.shape}")


def compute_support(a_pre, state: LayerPairState, arith=_F64):
    """Support ``a_pre @ weights + bias`` of the postsynaptic units."""
    _check_cols(a_pre, state.n_pre, "compute_support")
    return arith.matmul_bias(a_pre, state.weights, state.bias)


def hcu_softmax(support, geom: HypercolumnGeometry, arith=_F64):
    """Softmax taken separately inside every hypercolumn of ``geom``.

    The per-hypercolumn maximum is subtracted first, so large supports do not
    overflow.
    """
    support = np.asarray(support)
    _check_cols(support, geom.total_units, "hcu_softmax")
    if np.isnan(support).any():
        raise ValueError("hcu_softmax: NaN in support")
    n = support.shape[0]
    s = support.reshape(n, geom.n_hcus, geom.mcus_per_hcu)
    shifted = arith.sub(s, s.max(axis=2, keepdims=True))
    e = arith.exp(shifted).reshape(n, geom.total_units)
    z = arith.group_sum(e, geom.mcus_per_hcu)
    out = arith.div(e.reshape(s.shape), z[:, :, None])
    return out.reshape(n, geom.total_units)


@dataclass
class BatchStats:
    """Unnormalised sums over ``count`` samples: sum a_pre, sum a_post, sum a_pre (x) a_post."""

    count: int
    sum_pre: np.ndarray
    sum_post: np.ndarray
    sum_joint: np.ndarray


def batch_statistics(a_pre, a_post, arith=_F64) -> BatchStats:
    """Accumulate the sums needed for one trace update in a single pass."""
    if a_pre.shape[0] != a_post.shape[0]:
        raise ValueError("batch sizes of pre and post activity differ")
    s_pre, s_post, s_joint = arith.batch_stats(a_pre, a_post)
    return BatchStats(a_pre.shape[0], s_pre, s_post, s_joint)


def combine_statistics(parts, arith=_F64) -> BatchStats:
    """Reduce partial sums in the given (fixed) order."""
    parts = list(parts)
    total = parts[0]
    for p in parts[1:]:
        total = BatchStats(
            total.count + p.count,
            arith.add(total.sum_pre, p.sum_pre),
            arith.add(total.sum_post, p.sum_post),
            arith.add(total.sum_joint, p.sum_joint),
        )
    return total


def _ewma(trace, mean, lam, arith):
    keep = arith.sub(arith.asarray(1.0), arith.asarray(lam))
    return arith.add(arith.mul(keep, trace), arith.mul(arith.asarray(lam), mean))


def apply_statistics(state: LayerPairState, stats: BatchStats, lam, arith=_F64, eps=EPS_TRACE):
    """Blend batch means into the traces: ``C <- (1 - lam) C + lam <.>``, then clamp at ``eps``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    n = arith.asarray(float(stats.count))
    floor = arith.asarray(eps)
    state.trace_ci = np.maximum(_ewma(state.trace_ci, arith.div(stats.sum_pre, n), lam, arith), floor)
    state.trace_cj = np.maximum(_ewma(state.trace_cj, arith.div(stats.sum_post, n), lam, arith), floor)
    state.trace_cij = np.maximum(
        _ewma(state.trace_cij, arith.div(stats.sum_joint, n), lam, arith), floor
    )


def update_marginals(state: LayerPairState, a_pre, a_post, lam, arith=_F64, eps=EPS_TRACE):
    """Exponentially weighted update of ``C_i``, ``C_j`` and ``C_ij`` from one batch."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    _check_cols(a_pre, state.n_pre, "update_marginals (pre)")
    _check_cols(a_post, state.n_post, "update_marginals (post)")
    apply_statistics(state, batch_statistics(a_pre, a_post, arith), lam, arith, eps)


def update_weights_bias(state: LayerPairState, k_b, arith=_F64):
    """``w = log(C_ij / (C_i C_j))`` and ``b = k_b log C_j``."""
    if (state.trace_ci <= 0).any() or (state.trace_cj <= 0).any() or (state.trace_cij <= 0).any():
        raise RuntimeError("non-positive probability trace; traces must stay clamped above zero")
    denom = arith.mul(state.trace_ci[:, None], state.trace_cj[None, :])
    state.weights = arith.log(arith.div(state.trace_cij, denom))
    state.bias = arith.mul(arith.asarray(k_b), arith.log(state.trace_cj))


def expand_mask(mask: ConnectivityMask, mcus_per_hcu: int) -> np.ndarray:
    """Feature-by-unit boolean matrix; every MCU of a hypercolumn shares its column."""
    return np.repeat(mask.active, mcus_per_hcu, axis=1)


def apply_mask(state: LayerPairState, mask: ConnectivityMask):
    """Zero the weights of silent (feature, hypercolumn) connections.  Traces are kept."""
    n_features, n_hcus = mask.active.shape
    if n_features != state.n_pre or state.n_post % n_hcus:
        raise ValueError(
            f"mask {mask.active.shape} does not fit a {state.n_pre}x{state.n_post} weight matrix"
        )
    keep = expand_mask(mask, state.n_post // n_hcus)
    state.weights = np.where(keep, state.weights, state.weights.dtype.type(0))


def predict_classes(a_out, geom: HypercolumnGeometry | None = None) -> np.ndarray:
    """Index of the most active output unit per sample; ties go to the lowest index."""
    a_out = np.asarray(a_out)
    if geom is not None:
        _check_cols(a_out, geom.total_units, "predict_classes")
    return np.argmax(a_out, axis=1)
