"""Training losses: permutation-free diarization loss, attractor existence
loss, and their weighted total.

The speaker-permutation search runs on plain values (it is a discrete
choice); the returned loss tensors are built from the winning permutation so
gradients flow through the selected pairing only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffcore as dc
from .errors import ShapeError, TooManySpeakers

PROB_EPS = 1e-7

# Loss weighting presets: synthetic-corpus training vs adaptation to real data.
ALPHA_SIMULATED = 1.0
ALPHA_ADAPTATION = 0.01

PIT_EXHAUSTIVE_CAP = 8


@dataclass
class LossReport:
    total: float
    l_d: float
    l_a: float
    best_permutation: list[int] = field(default_factory=list)
    alpha: float = ALPHA_SIMULATED


def _as_tensor(p) -> dc.Tensor:
    return p if isinstance(p, dc.Tensor) else dc.Tensor(np.asarray(p, dtype=np.float64))


def bce(y, p) -> dc.Tensor:
    """Summed binary cross entropy; probabilities are clamped to [eps, 1-eps]."""
    p = _as_tensor(p)
    y = np.asarray(y, dtype=p.data.dtype)
    if y.shape != p.data.shape:
        raise ShapeError(f"bce shapes differ: {y.shape} vs {p.data.shape}")
    pc = dc.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = dc.sum_(dc.mul(dc.log(pc), y))
    neg = dc.sum_(dc.mul(dc.log(dc.sub(1.0, pc)), 1.0 - y))
    return dc.neg(dc.add(pos, neg))


def _bce_values(y_col: np.ndarray, p_row: np.ndarray) -> float:
    # Mirrors bce()'s forward arithmetic exactly (two sums, then negate) so
    # the cost matrix and the graph loss agree bit-for-bit.
    pc = np.clip(p_row, PROB_EPS, 1.0 - PROB_EPS)
    pos = np.sum(np.log(pc) * y_col)
    neg = np.sum(np.log(1.0 - pc) * (1.0 - y_col))
    return float(-(pos + neg))


def pit_cost_matrix(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """C[i, j] = summed BCE of posterior row i against label column j."""
    s, t = y_hat.shape
    cost = np.empty((s, s))
    for i in range(s):
        for j in range(s):
            cost[i, j] = _bce_values(y[:, j], y_hat[i, :])
    return cost


def best_permutation(cost: np.ndarray, use_hungarian: bool = False,
                     exhaustive_cap: int = PIT_EXHAUSTIVE_CAP) -> list[int]:
    """argmin over bijections of sum(cost[i, perm[i]]); lexicographic tie-break."""
    s = cost.shape[0]
    if s <= exhaustive_cap:
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(s)):
            c = sum(cost[i, perm[i]] for i in range(s))
            if c < best_cost:
                best, best_cost = perm, c
        return list(best)
    if not use_hungarian:
        raise TooManySpeakers(
            f"{s} speakers exceeds exhaustive cap {exhaustive_cap}; enable the assignment solver"
        )
    rows, cols = linear_sum_assignment(cost)
    return cols.tolist()


def pit_loss(y_hat, y, use_hungarian: bool = False,
             exhaustive_cap: int = PIT_EXHAUSTIVE_CAP) -> tuple[dc.Tensor, list[int]]:
    """Permutation-minimal diarization loss.

    y_hat: (S, T) posteriors (tensor or array); y: (T, S) binary labels.
    Returns the scalar loss, normalized by 1/(T*S), and the winning
    permutation `perm` with perm[i] = label column scored against output i.
    """
    y_hat = _as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.data.dtype)
    if y_hat.ndim != 2 or y.ndim != 2:
        raise ShapeError("pit_loss expects a (S, T) posterior and (T, S) labels")
    s, t = y_hat.data.shape
    if y.shape != (t, s):
        raise ShapeError(f"labels {y.shape} do not match posteriors {(s, t)}")

    perm = best_permutation(pit_cost_matrix(y_hat.data, y), use_hungarian, exhaustive_cap)

    loss = None
    for i in range(s):
        pair = bce(y[:, perm[i]], dc.slice_(y_hat, (i, slice(None))))
        loss = pair if loss is None else dc.add(loss, pair)
    return dc.mul(loss, 1.0 / (t * s)), perm


def attractor_existence_loss(p, n_speakers: int) -> dc.Tensor:
    """BCE of existence probabilities against S ones followed by one zero."""
    p = _as_tensor(p)
    if p.ndim != 1 or p.data.shape[0] != n_speakers + 1:
        raise ShapeError(
            f"expected {n_speakers + 1} existence probabilities, got shape {p.data.shape}"
        )
    labels = np.ones(n_speakers + 1, dtype=p.data.dtype)
    labels[-1] = 0.0
    return dc.mul(bce(labels, p), 1.0 / (1 + n_speakers))


def total_loss(l_d, l_a, alpha: float) -> dc.Tensor:
    """l_d + alpha * l_a."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return dc.add(_as_tensor(l_d), dc.mul(_as_tensor(l_a), float(alpha)))


def make_report(l_d: float, l_a: float, alpha: float, perm: list[int]) -> LossReport:
    return LossReport(
        total=l_d + alpha * l_a,
        l_d=l_d,
        l_a=l_a,
        best_permutation=list(perm),
        alpha=alpha,
    )
