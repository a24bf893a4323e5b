"""COCO-style detection evaluation: PR curves, AP50, AP75 and AP@[.5:.95].

All APs use 101-point interpolation. True positives are assigned greedily
per image in descending score order; score ties keep input order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import BoxXYXY, pairwise_iou
from .labelspace import FD_PROMPT, ToothLabel

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


class UndefinedAPError(ValueError):
    """Raised when a class has no ground truth, so AP is undefined."""


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    label: ToothLabel
    box: BoxXYXY
    score: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be a finite value in [0, 1], got {self.score}")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def exclude_posterior(preds: Iterable[DetectionRecord]) -> list[DetectionRecord]:
    return [r for r in preds if r.label is not ToothLabel.POSTERIOR_TEETH]


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP from rank-ordered recall/precision."""
    if len(recall) == 0:
        return 0.0
    # running max from the right gives max precision at recall >= r
    envelope = np.maximum.accumulate(np.asarray(precision, dtype=float)[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.zeros_like(RECALL_GRID)
    ok = idx < len(recall)
    sampled[ok] = envelope[idx[ok]]
    return float(sampled.mean())


def _by_image(records: Sequence[DetectionRecord]) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        out.setdefault(r.image_id, []).append(i)
    return out


def pr_curve(
    preds: Sequence[DetectionRecord],
    gts: Sequence[DetectionRecord],
    label: ToothLabel,
    iou_threshold: float = 0.5,
) -> PRCurve:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    gts = [g for g in gts if g.label is label]
    if not gts:
        raise UndefinedAPError(f"no ground truth for {label.prompt!r}")
    preds = [p for p in preds if p.label is label]
    if not preds:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)

    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    gt_idx = _by_image(gts)
    ious: dict[int, np.ndarray] = {}
    pred_idx = _by_image(preds)
    local_pos = {}
    for img, ids in pred_idx.items():
        for k, i in enumerate(ids):
            local_pos[i] = k
        if img in gt_idx:
            ious[img] = pairwise_iou(
                np.stack([preds[i].box.as_array() for i in ids]),
                np.stack([gts[j].box.as_array() for j in gt_idx[img]]),
            )
    claimed = {img: np.zeros(len(ids), dtype=bool) for img, ids in gt_idx.items()}

    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img = preds[i].image_id
        if img not in ious:
            continue
        row = ious[img][local_pos[i]]
        cand = np.where(~claimed[img] & (row >= iou_threshold), row, -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            claimed[img][j] = True
            tp[rank] = True

    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / len(gts)
    precision = ctp / (ctp + cfp)
    return PRCurve(recall, precision, interpolated_ap(recall, precision))


@dataclass
class EvalReport:
    AP50: float
    AP75: float
    AP: float
    AP50_FD: float | None
    AP75_FD: float | None
    AP_FD: float | None
    classes: list[str]
    per_class: dict[str, dict[float, float]] = field(default_factory=dict)
    pr_curves: dict[str, PRCurve] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "AP50": self.AP50,
            "AP75": self.AP75,
            "AP": self.AP,
            "AP50_FD": self.AP50_FD,
            "AP75_FD": self.AP75_FD,
            "AP_FD": self.AP_FD,
            "classes": self.classes,
            "per_class": {
                name: {f"{t:.2f}": ap for t, ap in aps.items()} for name, aps in self.per_class.items()
            },
            "pr_iou_threshold": 0.5,
        }

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "recall", "precision"])
            for name, curve in self.pr_curves.items():
                for r, p in curve.points:
                    w.writerow([name, repr(r), repr(p)])


def coco_ap(
    preds: Sequence[DetectionRecord],
    gts: Sequence[DetectionRecord],
    classes: Sequence[ToothLabel] = FD_PROMPT,
    fd_class: ToothLabel | None = ToothLabel.ANTERIOR_FD,
    exclude_posterior_output: bool = False,
) -> EvalReport:
    """AP50, AP75 and mean AP over IoU 0.50:0.05:0.95, averaged over ``classes``.

    Classes without ground truth are left out of the class mean. The
    ``*_FD`` fields restrict to ``fd_class`` and are ``None`` when that
    class is not evaluated.
    """
    if exclude_posterior_output:
        preds = exclude_posterior(preds)
    per_class: dict[str, dict[float, float]] = {}
    curves: dict[str, PRCurve] = {}
    for lab in classes:
        try:
            aps = {t: pr_curve(preds, gts, lab, t).ap for t in IOU_THRESHOLDS}
        except UndefinedAPError:
            continue
        per_class[lab.prompt] = aps
        curves[lab.prompt] = pr_curve(preds, gts, lab, 0.5)
    if not per_class:
        raise UndefinedAPError("none of the evaluated classes has ground truth")

    def class_mean(t: float) -> float:
        return float(np.mean([aps[t] for aps in per_class.values()]))

    ap50 = class_mean(0.5)
    ap75 = class_mean(0.75)
    ap = float(np.mean([class_mean(t) for t in IOU_THRESHOLDS]))
    fd = per_class.get(fd_class.prompt) if fd_class is not None else None
    return EvalReport(
        AP50=ap50,
        AP75=ap75,
        AP=ap,
        AP50_FD=fd[0.5] if fd else None,
        AP75_FD=fd[0.75] if fd else None,
        AP_FD=float(np.mean([fd[t] for t in IOU_THRESHOLDS])) if fd else None,
        classes=[lab.prompt for lab in classes],
        per_class=per_class,
        pr_curves=curves,
    )
