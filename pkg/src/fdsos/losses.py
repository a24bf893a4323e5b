"""Focal text-contrastive classification loss and L1 + GIoU box loss.

Every loss returns its value together with the exact gradient with
respect to its inputs (logits or center-size box parameters), so the toy
detector can be trained without an autodiff framework.

Targets are int8 matrices: ``POS`` (1), ``NEG`` (0) or ``NOCARE`` (-1).
No-care entries contribute neither loss nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BoxCXCYWH, cxcywh_to_xyxy_array
from .labelspace import VOCABULARY, DenoisingBatch, ToothLabel
from .matching import Assignment, Outcome

POS, NEG, NOCARE = 1, 0, -1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    dn_weight: float = 1.0
    prompt_scoped: bool = False  # targets only over the scene's task prompt

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if min(self.lambda_l1, self.lambda_giou, self.dn_weight) < 0:
            raise ValueError("loss weights must be >= 0")


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def focal_terms(logits: np.ndarray, targets: np.ndarray, alpha: float, gamma: float):
    """Per-entry sigmoid focal loss and its derivative, no normalization."""
    x = np.asarray(logits, dtype=float)
    s = sigmoid(x)
    log_s = -np.logaddexp(0.0, -x)
    log_1ms = -np.logaddexp(0.0, x)
    one_m_s = sigmoid(-x)
    pos = targets == POS
    neg = targets == NEG

    loss = np.zeros_like(x)
    grad = np.zeros_like(x)
    wp = alpha * one_m_s[pos] ** gamma
    loss[pos] = -wp * log_s[pos]
    grad[pos] = wp * (gamma * s[pos] * log_s[pos] - one_m_s[pos])
    wn = (1.0 - alpha) * s[neg] ** gamma
    loss[neg] = -wn * log_1ms[neg]
    grad[neg] = wn * (s[neg] - gamma * one_m_s[neg] * log_1ms[neg])
    return loss, grad


def focal_contrastive_loss(logits: np.ndarray, targets: np.ndarray, cfg: LossConfig = LossConfig()):
    """Focal loss over query-by-token logits, normalized by the positive count.

    Returns ``(loss, d loss / d logits)``.
    """
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("empty target matrix")
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {targets.shape}")
    loss, grad = focal_terms(logits, targets, cfg.alpha, cfg.gamma)
    norm = max(1, int((targets == POS).sum()))
    return float(loss.sum() / norm), grad / norm


# ---------------------------------------------------------------------------
# box loss


def localization_terms(pred: np.ndarray, gt: np.ndarray, lambda_l1: float, lambda_giou: float):
    """Per-pair ``lambda_l1 * L1 + lambda_giou * (1 - GIoU)`` for (N, 4) cxcywh arrays.

    Returns ``(losses (N,), d losses / d pred (N, 4))``. The GIoU gradient
    follows whichever of the min/max branches is active; on exact ties
    the branch that keeps the gt coordinate is taken.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 4)
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)

    diff = pred - gt
    l1 = np.abs(diff).sum(1)
    g_l1 = np.sign(diff)

    x1, y1, x2, y2 = cxcywh_to_xyxy_array(pred).T
    gx1, gy1, gx2, gy2 = cxcywh_to_xyxy_array(gt).T

    iw_raw = np.minimum(x2, gx2) - np.maximum(x1, gx1)
    ih_raw = np.minimum(y2, gy2) - np.maximum(y1, gy1)
    overlap = (iw_raw > 0) & (ih_raw > 0)
    iw = np.where(overlap, iw_raw, 0.0)
    ih = np.where(overlap, ih_raw, 0.0)
    inter = iw * ih
    pw, ph = x2 - x1, y2 - y1
    area_p = pw * ph
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    cw = np.maximum(x2, gx2) - np.minimum(x1, gx1)
    ch = np.maximum(y2, gy2) - np.minimum(y1, gy1)
    hull = cw * ch
    giou = inter / union - (hull - union) / hull

    # d/d(x1, y1, x2, y2) of each piece
    d_inter = np.stack(
        [
            -ih * (x1 > gx1),
            -iw * (y1 > gy1),
            ih * (x2 < gx2),
            iw * (y2 < gy2),
        ],
        axis=1,
    )
    d_area = np.stack([-ph, -pw, ph, pw], axis=1)
    d_union = d_area - d_inter
    d_hull = np.stack(
        [
            -ch * (x1 < gx1),
            -cw * (y1 < gy1),
            ch * (x2 > gx2),
            cw * (y2 > gy2),
        ],
        axis=1,
    )
    u, c, i = union[:, None], hull[:, None], inter[:, None]
    d_giou_xyxy = d_inter / u - i * d_union / u**2 + d_union / c - u * d_hull / c**2

    # xyxy -> cxcywh chain rule
    gx = d_giou_xyxy
    d_giou = np.stack(
        [
            gx[:, 0] + gx[:, 2],
            gx[:, 1] + gx[:, 3],
            (gx[:, 2] - gx[:, 0]) / 2,
            (gx[:, 3] - gx[:, 1]) / 2,
        ],
        axis=1,
    )
    losses = lambda_l1 * l1 + lambda_giou * (1.0 - giou)
    grads = lambda_l1 * g_l1 - lambda_giou * d_giou
    return losses, grads


def localization_loss(pred: BoxCXCYWH, gt: BoxCXCYWH, cfg: LossConfig = LossConfig()):
    """Box loss for one pair; returns ``(loss, gradient over (cx, cy, w, h))``."""
    losses, grads = localization_terms(pred.as_array(), gt.as_array(), cfg.lambda_l1, cfg.lambda_giou)
    return float(losses[0]), grads[0]


# ---------------------------------------------------------------------------
# target construction and composition


def prompt_columns(prompt: Sequence[ToothLabel] | None) -> np.ndarray:
    """Boolean mask over the vocabulary of tokens present in ``prompt``."""
    if prompt is None:
        return np.ones(len(VOCABULARY), dtype=bool)
    return np.array([lab in prompt for lab in VOCABULARY], dtype=bool)


def build_targets(
    assignment: Assignment,
    gt_labels: np.ndarray,
    prompt: Sequence[ToothLabel] | None = None,
) -> np.ndarray:
    """Target matrix (Q, T) from a matching outcome.

    Matched rows are positive on their ground-truth token, negative rows
    are all negative and no-care rows all no-care. Tokens outside the
    image's prompt are no-care everywhere.
    """
    q = len(assignment.outcomes)
    t = np.full((q, len(VOCABULARY)), NEG, dtype=np.int8)
    matched = assignment.gt_index >= 0
    t[np.flatnonzero(matched), np.asarray(gt_labels, dtype=int)[assignment.gt_index[matched]]] = POS
    t[assignment.mask(Outcome.NOCARE)] = NOCARE
    t[:, ~prompt_columns(prompt)] = NOCARE
    return t


def denoising_targets(batch: DenoisingBatch, prompt: Sequence[ToothLabel] | None = None) -> np.ndarray:
    """Positive queries reconstruct their label; negative queries are background."""
    t = np.full((len(batch), len(VOCABULARY)), NEG, dtype=np.int8)
    pos = np.flatnonzero(batch.positive)
    t[pos, batch.labels[pos]] = POS
    t[:, ~prompt_columns(prompt)] = NOCARE
    return t


@dataclass
class LossResult:
    total: float
    cls: float
    box: float
    dn: float
    grad_logits: np.ndarray
    grad_boxes: np.ndarray
    grad_dn_logits: np.ndarray | None = None
    grad_dn_boxes: np.ndarray | None = None


def total_loss(
    logits: np.ndarray,
    boxes: np.ndarray,
    assignment: Assignment,
    gt_labels: np.ndarray,
    gt_boxes: np.ndarray,
    cfg: LossConfig = LossConfig(),
    prompt: Sequence[ToothLabel] | None = None,
    dn_logits: np.ndarray | None = None,
    dn_boxes: np.ndarray | None = None,
    dn_batch: DenoisingBatch | None = None,
) -> LossResult:
    """Scene loss: matching branch plus optional denoising branch.

    ``boxes``, ``gt_boxes`` and ``dn_boxes`` are cxcywh. Matched predictions
    get focal + box losses, negative predictions focal negatives only,
    no-care predictions nothing. Positive denoising queries get focal + box
    reconstruction against their source box; negative ones focal
    background. Both focal and box terms are normalized by the number of
    positives they supervise.
    """
    targets = build_targets(assignment, gt_labels, prompt)
    cls, g_logits = focal_contrastive_loss(logits, targets, cfg)

    g_boxes = np.zeros_like(np.asarray(boxes, dtype=float))
    matched = np.flatnonzero(assignment.gt_index >= 0)
    box = 0.0
    if matched.size:
        losses, grads = localization_terms(
            boxes[matched], gt_boxes[assignment.gt_index[matched]], cfg.lambda_l1, cfg.lambda_giou
        )
        box = float(losses.sum() / matched.size)
        g_boxes[matched] = grads / matched.size

    dn = 0.0
    g_dn_logits = g_dn_boxes = None
    if dn_batch is not None:
        dn_t = denoising_targets(dn_batch, prompt)
        dn_cls, g_dn_logits = focal_contrastive_loss(dn_logits, dn_t, cfg)
        g_dn_boxes = np.zeros_like(np.asarray(dn_boxes, dtype=float))
        pos = np.flatnonzero(dn_batch.positive)
        dn_box = 0.0
        if pos.size:
            losses, grads = localization_terms(
                dn_boxes[pos], gt_boxes[dn_batch.source_gt_index[pos]], cfg.lambda_l1, cfg.lambda_giou
            )
            dn_box = float(losses.sum() / pos.size)
            g_dn_boxes[pos] = grads / pos.size
        w = cfg.dn_weight
        dn = w * (dn_cls + dn_box)
        g_dn_logits = w * g_dn_logits
        g_dn_boxes = w * g_dn_boxes

    return LossResult(
        total=cls + box + dn,
        cls=cls,
        box=box,
        dn=dn,
        grad_logits=g_logits,
        grad_boxes=g_boxes,
        grad_dn_logits=g_dn_logits,
        grad_dn_boxes=g_dn_boxes,
    )
