"""Mask selection from supplied weights: per-block importance scores,
one-shot or incremental zeroing schedules, and smoothed penalty objectives.

There is no training here.  Scores are computed once from the given
weights; the incremental schedule is the no-retraining degeneration of the
stepwise procedure (refreshing scores between rounds would be a no-op).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockError, BlockMask, BlockShape, ceil_div, grid_for

MEASURES = ("l1", "l2", "variance")


class SparsifyError(ValueError):
    pass


@dataclass(frozen=True)
class ImportanceMeasure:
    kind: str = "l2"

    def __post_init__(self):
        if self.kind not in MEASURES:
            raise SparsifyError(f"unknown measure {self.kind!r}; choose from {MEASURES}")


@dataclass(frozen=True)
class SparsitySchedule:
    mode: str = "oneshot"          # "oneshot" | "incremental"
    target: float = 0.5
    step_fraction: float = 0.05
    granularity: BlockShape = field(default_factory=lambda: BlockShape(8, 8))

    def __post_init__(self):
        if self.mode not in ("oneshot", "incremental"):
            raise SparsifyError(f"unknown schedule mode {self.mode!r}")
        if not 0.0 <= self.target <= 1.0:
            raise SparsifyError(f"target sparsity {self.target} outside [0, 1]")
        if not 0.0 < self.step_fraction <= 1.0:
            raise SparsifyError(f"step_fraction {self.step_fraction} outside (0, 1]")


def score_blocks(w: np.ndarray, shape: BlockShape, measure: ImportanceMeasure,
                 tensor_mean: bool = False) -> np.ndarray:
    """One score per mask cell.

    l1 = sum |w|, l2 = sqrt(sum w^2), variance = mean((w - mu)^2) with mu
    the block mean by default (whole-tensor mean behind tensor_mean).
    Partial edge blocks score over the elements actually present.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        w = w[:, None, None, :]
    if w.ndim != 4:
        raise SparsifyError(f"weights must be 4-D or 2-D, got ndim={w.ndim}")
    out_ch, h, k, in_ch = w.shape
    rows, cols = grid_for(out_ch, in_ch, shape)
    scores = np.zeros((rows, cols), dtype=np.float64)
    mu_global = float(w.mean()) if tensor_mean else None
    for r in range(rows):
        for c in range(cols):
            blk = w[r * shape.b_o:min((r + 1) * shape.b_o, out_ch), :, :,
                    c * shape.b_i:min((c + 1) * shape.b_i, in_ch)]
            if measure.kind == "l1":
                scores[r, c] = np.abs(blk).sum()
            elif measure.kind == "l2":
                scores[r, c] = math.sqrt(float((blk * blk).sum()))
            else:
                mu = mu_global if tensor_mean else float(blk.mean())
                scores[r, c] = float(((blk - mu) ** 2).mean())
    return scores


def _zero_order(scores: np.ndarray) -> np.ndarray:
    """Flat cell indices sorted by (score, block_row, block_col) ascending."""
    rows, cols = scores.shape
    rr, cc = np.divmod(np.arange(scores.size), cols)
    return np.lexsort((cc, rr, scores.ravel()))


def select_mask(w: np.ndarray, shape: BlockShape, measure: ImportanceMeasure,
                schedule: SparsitySchedule) -> BlockMask:
    """Mask achieving the target sparsity from per-block importance scores.

    OneShot zeroes the floor(target * cells) lowest-scoring blocks in one
    step.  Incremental zeroes max(1, floor(step_fraction * remaining))
    blocks per round, remaining counted toward the target, until the target
    count is reached; with static scores the final zero set matches
    OneShot.  Ties break by (block_row, block_col) ascending.
    """
    scores = score_blocks(w, shape, measure)
    cells = scores.size
    n_zero = int(math.floor(schedule.target * cells))
    if n_zero > cells:
        raise SparsifyError(f"target {schedule.target} infeasible for {cells} blocks")
    order = _zero_order(scores)

    if schedule.mode == "oneshot" or n_zero == 0:
        chosen = order[:n_zero]
    else:
        zeroed = 0
        while zeroed < n_zero:
            remaining = n_zero - zeroed
            step = max(1, int(math.floor(schedule.step_fraction * remaining)))
            zeroed += min(step, remaining)
        chosen = order[:zeroed]

    bits = np.ones(cells, dtype=np.uint8)
    bits[chosen] = 0
    return BlockMask(bits.reshape(scores.shape), shape)


def incremental_round_sizes(cells: int, schedule: SparsitySchedule) -> list[int]:
    """Round sizes the incremental schedule takes for a grid of `cells` blocks."""
    n_zero = int(math.floor(schedule.target * cells))
    sizes = []
    zeroed = 0
    while zeroed < n_zero:
        step = max(1, int(math.floor(schedule.step_fraction * (n_zero - zeroed))))
        step = min(step, n_zero - zeroed)
        sizes.append(step)
        zeroed += step
    return sizes


# -- penalty objectives ---------------------------------------------------

PENALTY_VARIANTS = ("v1", "v2", "v3")


@dataclass(frozen=True)
class PenaltyParams:
    alpha: float = 10.0    # LSE sharpness
    beta: float = 1.0      # L2 coefficient
    iota: float = 0.0      # L1 coefficient
    t_target: float = 0.0  # desired count of nonzero blocks
    variant: str = "v1"

    def __post_init__(self):
        if self.alpha <= 0:
            raise SparsifyError(f"alpha must be positive, got {self.alpha}")
        if self.variant not in PENALTY_VARIANTS:
            raise SparsifyError(f"unknown penalty variant {self.variant!r}")


def lse(x, alpha: float) -> float:
    """Smooth max: (1/alpha) * log sum exp(alpha * x_i), computed stably."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise SparsifyError("lse of an empty vector")
    z = alpha * x
    m = float(z.max())
    return (m + math.log(float(np.exp(z - m).sum()))) / alpha


def _smooth_max(x, alpha):
    return lse(x, alpha)


def _smooth_min(x, alpha):
    return -lse(-np.asarray(x, dtype=np.float64), alpha)


def penalty(gamma_values: np.ndarray, params: PenaltyParams) -> float:
    """Evaluate the chosen penalty variant with max/min smoothed by LSE.

    Hinge terms max(v, 0) act on the flattened values with 0 appended.  The
    L2 term uses the scalar interpretation |sum(gamma) - T|; L1 is
    sum |gamma|.  Evaluated only, never optimized.
    """
    g = np.asarray(gamma_values, dtype=np.float64).ravel()
    if g.size == 0 or not np.isfinite(g).all():
        raise SparsifyError("penalty needs a non-empty finite grid")
    a = params.alpha
    spread = _smooth_max(g, a) - _smooth_min(g, a)
    l2_term = params.beta * abs(float(g.sum()) - params.t_target)
    l1_term = params.iota * float(np.abs(g).sum())

    if params.variant == "v1":
        return -spread + l2_term + l1_term

    hinge_neg = _smooth_max(np.append(-g, 0.0), a)
    hinge_over = _smooth_max(np.append(g - 1.0, 0.0), a)
    if params.variant == "v2":
        return hinge_neg + hinge_over - spread + l2_term + l1_term

    denom = _smooth_max(g, a)
    if abs(denom) < 1e-12:
        raise SparsifyError("v3 penalty: smoothed max denominator is zero")
    return hinge_neg + hinge_over - _smooth_min(g, a) / denom + l2_term + l1_term
