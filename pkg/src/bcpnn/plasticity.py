"""Structural plasticity of the input -> hidden connections.

Each hidden hypercolumn listens to a fixed number ``fan_in`` of input
features.  Connections are scored by the mutual information between the
feature and the hypercolumn, both estimated from the running probability
traces, and every hypercolumn greedily trades its least informative active
feature for the most informative silent one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .model import HypercolumnGeometry, LayerPairState

MASK_STREAM = 0x6D61736B  # separates the mask RNG stream from the shuffle streams

# Scores closer than this are treated as equal.  Without it, rounding noise in
# the traces (for instance from a different summation order across workers)
# would decide swaps between near-identical, near-zero scores.
SCORE_TIE_TOL = 1e-12


@dataclass(eq=False)
class ConnectivityMask:
    """Boolean ``(n_features, n_hcus)`` matrix; each column has exactly ``fan_in`` active entries."""

    active: np.ndarray
    fan_in: int

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if self.active.ndim != 2:
            raise ValueError("mask must be a 2-D (features x hypercolumns) array")
        counts = self.active.sum(axis=0)
        if (counts != self.fan_in).any():
            raise ValueError(f"every hypercolumn needs exactly {self.fan_in} active inputs, got {counts}")

    @property
    def n_features(self) -> int:
        return self.active.shape[0]

    @property
    def n_hcus(self) -> int:
        return self.active.shape[1]

    def copy(self) -> "ConnectivityMask":
        return ConnectivityMask(self.active.copy(), self.fan_in)


def init_mask(seed, n_features: int, n_hcus: int, d: int) -> ConnectivityMask:
    """Random mask: ``d`` distinct features per hypercolumn, uniformly chosen."""
    if not 1 <= d <= n_features:
        raise ValueError(f"fan-in d={d} must be in [1, {n_features}]")
    rng = np.random.default_rng([MASK_STREAM, seed])
    active = np.zeros((n_features, n_hcus), dtype=bool)
    for h in range(n_hcus):
        active[rng.choice(n_features, size=d, replace=False), h] = True
    return ConnectivityMask(active, d)


def mi_scores(state: "LayerPairState", hidden_geom: "HypercolumnGeometry") -> np.ndarray:
    """Mutual information between every input feature and every hidden hypercolumn.

    Each feature is treated as a binary variable that is on with probability
    ``C_i``; the hypercolumn is a categorical variable over its minicolumns.
    With ``p11 = C_ij`` and ``p01 = C_j - C_ij``::

        score[i, h] = sum_{j in h} p11 log(p11 / (C_i C_j)) + p01 log(p01 / ((1 - C_i) C_j))

    Terms whose joint probability is zero contribute nothing.
    """
    if state.n_post != hidden_geom.total_units:
        raise ValueError("trace matrix does not match the hidden geometry")
    ci = np.asarray(state.trace_ci, np.float64)[:, None]
    cj = np.asarray(state.trace_cj, np.float64)[None, :]
    p11 = np.asarray(state.trace_cij, np.float64)
    p01 = cj - p11
    p0 = 1.0 - ci
    with np.errstate(divide="ignore", invalid="ignore"):
        t_on = np.where(p11 > 0, p11 * np.log(p11 / (ci * cj)), 0.0)
        t_off = np.where((p01 > 0) & (p0 > 0), p01 * np.log(p01 / (p0 * cj)), 0.0)
    terms = t_on + t_off
    return terms.reshape(state.n_pre, hidden_geom.n_hcus, hidden_geom.mcus_per_hcu).sum(axis=2)


def rewire(mask: ConnectivityMask, scores, swaps_per_hcu: int = 1, tol: float = SCORE_TIE_TOL) -> int:
    """Swap low-scoring active inputs for high-scoring silent ones, in place.

    Per hypercolumn, up to ``swaps_per_hcu`` times: the active feature with the
    lowest score is silenced and the silent feature with the highest score is
    activated, but only while that raises the column's score by more than
    ``tol``.  Scores within ``tol`` of the extreme count as tied and ties go to
    the lowest feature index.  Returns the number of swaps made.
    """
    scores = np.asarray(scores)
    if scores.shape != mask.active.shape:
        raise ValueError(f"scores {scores.shape} do not match mask {mask.active.shape}")
    swaps = 0
    for h in range(mask.n_hcus):
        col = mask.active[:, h]
        s = scores[:, h]
        for _ in range(swaps_per_hcu):
            act = np.flatnonzero(col)
            sil = np.flatnonzero(~col)
            if sil.size == 0:
                break
            sa, ss = s[act], s[sil]
            worst = act[np.flatnonzero(sa <= sa.min() + tol)[0]]
            best = sil[np.flatnonzero(ss >= ss.max() - tol)[0]]
            if not s[best] > s[worst] + tol:
                break
            col[worst] = False
            col[best] = True
            swaps += 1
    return swaps
