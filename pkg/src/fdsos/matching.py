"""Bipartite matching with positional no-care masking for unannotated teeth.

Predictions are matched one-to-one to ground truth by minimum total cost.
In images where only anterior teeth are annotated, leftover predictions
sitting beside the anterior region (horizontally outside it, vertically
inside it) are most likely real but unannotated posterior teeth; they get
a no-care outcome so they are neither rewarded nor penalized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import (
    BoxXYXY,
    pairwise_giou,
    pairwise_l1,
    xyxy_to_cxcywh_array,
)
from .labelspace import VOCABULARY, ToothLabel, attributes

# relative slack under which two assignment costs count as a tie
TIE_RTOL = 1e-12


class NoExtremitiesError(ValueError):
    """Raised when there are no anterior boxes to bound the anterior region."""


@dataclass(frozen=True)
class AnteriorExtremities:
    left: float
    right: float
    top: float
    bottom: float

    def __post_init__(self):
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(f"invalid extremities {self}")


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        ws = (self.w_cls, self.w_l1, self.w_giou)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("cost weights must be nonnegative with at least one positive")


class Outcome(enum.Enum):
    MATCHED = "matched"
    NEGATIVE = "negative"
    NOCARE = "nocare"


@dataclass
class Assignment:
    outcomes: list[Outcome]
    gt_index: np.ndarray  # (Q,) matched gt index or -1
    total_cost: float
    cost_cls: np.ndarray = field(repr=False)  # (Q, G) weighted terms
    cost_l1: np.ndarray = field(repr=False)
    cost_giou: np.ndarray = field(repr=False)

    @property
    def matched_pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.gt_index) if j >= 0]

    def mask(self, outcome: Outcome) -> np.ndarray:
        return np.array([o is outcome for o in self.outcomes], dtype=bool)

    def to_json(self) -> list[dict]:
        rows = []
        for i, (o, j) in enumerate(zip(self.outcomes, self.gt_index)):
            row: dict = {"prediction": i, "outcome": o.value}
            if j >= 0:
                row["gt_index"] = int(j)
                row["cost_terms"] = {
                    "cls": float(self.cost_cls[i, j]),
                    "l1": float(self.cost_l1[i, j]),
                    "giou": float(self.cost_giou[i, j]),
                }
            rows.append(row)
        return rows


def anterior_extremities(gt_boxes: Sequence[BoxXYXY] | np.ndarray) -> AnteriorExtremities:
    b = _as_xyxy_array(gt_boxes)
    if b.shape[0] == 0:
        raise NoExtremitiesError("no anterior boxes; skip masking for this image")
    return AnteriorExtremities(
        left=float(b[:, 0].min()),
        right=float(b[:, 2].max()),
        top=float(b[:, 1].min()),
        bottom=float(b[:, 3].max()),
    )


def posterior_mask(pred_boxes: Sequence[BoxXYXY] | np.ndarray, e: AnteriorExtremities) -> np.ndarray:
    """True for boxes horizontally outside and vertically inside the anterior region."""
    b = _as_xyxy_array(pred_boxes)
    outside_x = (b[:, 0] < e.left) | (b[:, 2] > e.right)
    inside_y = (b[:, 1] > e.top) & (b[:, 3] < e.bottom)
    return outside_x & inside_y


def _as_xyxy_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(float)
    return np.array([b.as_array() for b in boxes], dtype=float).reshape(-1, 4)


# ---------------------------------------------------------------------------
# assignment solver


def _solve(cost: np.ndarray) -> tuple[float, dict[int, int]]:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), dict(zip(rows.tolist(), cols.tolist()))


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size ``min(n_rows, n_cols)``.

    Among equal-cost optima the pair list (sorted by row) that is
    lexicographically smallest is returned, so results do not depend on
    solver internals.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or min(cost.shape) < 1:
        raise ValueError(f"cost must be a non-empty matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains NaN or infinite entries")

    best, sigma = _solve(cost)
    tol = TIE_RTOL * max(1.0, abs(best))
    n_rows, n_cols = cost.shape
    k = min(n_rows, n_cols)

    # Uniqueness probe: any other optimum shares at most k-1 pairs with sigma,
    # so penalizing sigma's pairs makes it lose whenever a tie exists.
    penalized = cost.copy()
    rows = list(sigma)
    penalized[rows, [sigma[r] for r in rows]] += 1e3 * tol
    if _solve(penalized)[1] == sigma:
        return sorted(sigma.items())

    fixed: dict[int, int] = {}
    skipped: set[int] = set()
    fixed_cost = 0.0
    for r in range(n_rows):
        if len(fixed) == k:
            break
        current = sigma.get(r)
        used = set(fixed.values())
        free_rows = [i for i in range(n_rows) if i not in fixed and i not in skipped and i != r]
        candidates = [c for c in range(n_cols) if c not in used and (current is None or c < current)]
        chosen = None
        for c in candidates:
            free_cols = [j for j in range(n_cols) if j not in used and j != c]
            total = fixed_cost + cost[r, c]
            sub = {}
            if free_rows and free_cols:
                sub_cost = cost[np.ix_(free_rows, free_cols)]
                if min(len(free_rows), len(free_cols)) < k - len(fixed) - 1:
                    continue
                val, sub_sigma = _solve(sub_cost)
                total += val
                sub = {free_rows[i]: free_cols[j] for i, j in sub_sigma.items()}
            elif k - len(fixed) - 1 > 0:
                continue
            if total <= best + tol:
                chosen = c
                sigma = {**fixed, r: c, **sub}
                break
        if chosen is None:
            chosen = current
        if chosen is None:
            skipped.add(r)
        else:
            fixed[r] = chosen
            fixed_cost += cost[r, chosen]
    return sorted(fixed.items())


# ---------------------------------------------------------------------------
# teeth-specific matching


def cost_terms(
    pred_scores: np.ndarray,
    pred_boxes_xyxy: np.ndarray,
    gt_labels: np.ndarray,
    gt_boxes_xyxy: np.ndarray,
    weights: CostWeights,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted (Q, G) class, L1 and GIoU cost matrices."""
    cls = weights.w_cls * (1.0 - pred_scores[:, gt_labels])
    l1 = weights.w_l1 * pairwise_l1(xyxy_to_cxcywh_array(pred_boxes_xyxy), xyxy_to_cxcywh_array(gt_boxes_xyxy))
    gi = weights.w_giou * (1.0 - pairwise_giou(pred_boxes_xyxy, gt_boxes_xyxy))
    return cls, l1, gi


def match_arrays(
    pred_scores: np.ndarray,
    pred_boxes_xyxy: np.ndarray,
    gt_labels: np.ndarray,
    gt_boxes_xyxy: np.ndarray,
    weights: CostWeights = CostWeights(),
    tma_enabled: bool = True,
    annotation_complete: bool = False,
) -> Assignment:
    """Array-level :func:`match`.

    ``pred_scores`` is (Q, T) class probabilities over the vocabulary,
    ``gt_labels`` holds vocabulary indices.
    """
    pred_scores = np.asarray(pred_scores, dtype=float)
    pred_boxes_xyxy = np.asarray(pred_boxes_xyxy, dtype=float).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=int).reshape(-1)
    gt_boxes_xyxy = np.asarray(gt_boxes_xyxy, dtype=float).reshape(-1, 4)
    q = pred_boxes_xyxy.shape[0]
    if q == 0:
        raise ValueError("match needs at least one prediction")

    outcomes = [Outcome.NEGATIVE] * q
    gt_index = np.full(q, -1, dtype=int)
    if gt_labels.size == 0:
        empty = np.zeros((q, 0))
        return Assignment(outcomes, gt_index, 0.0, empty, empty, empty)

    cls, l1, gi = cost_terms(pred_scores, pred_boxes_xyxy, gt_labels, gt_boxes_xyxy, weights)
    cost = cls + l1 + gi
    pairs = hungarian(cost)
    for i, j in pairs:
        outcomes[i] = Outcome.MATCHED
        gt_index[i] = j
    total = float(sum(cost[i, j] for i, j in pairs))

    if tma_enabled and not annotation_complete:
        anterior = np.array([attributes(VOCABULARY[lab])[0] == 1 for lab in gt_labels])
        if anterior.any():
            ext = anterior_extremities(gt_boxes_xyxy[anterior])
            in_mask = posterior_mask(pred_boxes_xyxy, ext)
            for i in range(q):
                if outcomes[i] is Outcome.NEGATIVE and in_mask[i]:
                    outcomes[i] = Outcome.NOCARE
    return Assignment(outcomes, gt_index, total, cls, l1, gi)


def match(
    preds: Sequence[tuple[Sequence[float], BoxXYXY]],
    gts: Sequence[tuple[ToothLabel, BoxXYXY]],
    weights: CostWeights = CostWeights(),
    tma_enabled: bool = True,
    annotation_complete: bool = False,
) -> Assignment:
    """Match predictions ``(class scores, box)`` to ground truth ``(label, box)``."""
    if not preds:
        raise ValueError("match needs at least one prediction")
    scores = np.array([s for s, _ in preds], dtype=float)
    boxes = _as_xyxy_array([b for _, b in preds])
    labels = np.array([lab.index for lab, _ in gts], dtype=int)
    gt_boxes = _as_xyxy_array([b for _, b in gts])
    return match_arrays(scores, boxes, labels, gt_boxes, weights, tma_enabled, annotation_complete)
