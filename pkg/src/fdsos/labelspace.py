"""Dental label vocabulary and conditional label flipping for denoising queries.

The vocabulary is the union of two prompts: tooth position detection
("Posterior Teeth", "Anterior Teeth") and anterior diagnosis
("Anterior Teeth No FD", "Anterior Teeth FD"). Each label carries a
position attribute (0 posterior, 1 anterior) and a diagnosis attribute
(0 healthy, 1 FD, or unknown).
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import BoxCXCYWH, BoxXYXY, jitter_boxes, xyxy_to_cxcywh_array

DEFAULT_FLIP_P = 0.5


class ToothLabel(enum.Enum):
    POSTERIOR_TEETH = "Posterior Teeth"
    ANTERIOR_TEETH = "Anterior Teeth"
    ANTERIOR_NO_FD = "Anterior Teeth No FD"
    ANTERIOR_FD = "Anterior Teeth FD"

    @property
    def prompt(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return VOCABULARY.index(self)

    @classmethod
    def from_prompt(cls, name: str) -> "ToothLabel":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown category name {name!r}") from None


VOCABULARY: tuple[ToothLabel, ...] = tuple(ToothLabel)

TEETH_PROMPT = (ToothLabel.ANTERIOR_TEETH, ToothLabel.POSTERIOR_TEETH)
FD_PROMPT = (ToothLabel.ANTERIOR_NO_FD, ToothLabel.ANTERIOR_FD)


_ATTRIBUTES = {
    ToothLabel.POSTERIOR_TEETH: (0, None),
    ToothLabel.ANTERIOR_TEETH: (1, None),
    ToothLabel.ANTERIOR_NO_FD: (1, 0),
    ToothLabel.ANTERIOR_FD: (1, 1),
}


def attributes(label: ToothLabel) -> tuple[int, int | None]:
    """Return ``(position, diagnosis)``; diagnosis is ``None`` when unknown."""
    return _ATTRIBUTES[label]


def is_diagnosed(label: ToothLabel) -> bool:
    return _ATTRIBUTES[label][1] is not None


@dataclass(frozen=True)
class TransitionDistribution:
    source: ToothLabel
    p: float
    probs: Mapping[ToothLabel, float]

    def __post_init__(self):
        if any(v < 0 for v in self.probs.values()):
            raise ValueError("negative transition probability")
        if abs(sum(self.probs.values()) - 1.0) > 1e-12:
            raise ValueError("transition probabilities do not sum to 1")

    def __getitem__(self, label: ToothLabel) -> float:
        return self.probs.get(label, 0.0)

    def as_vector(self) -> np.ndarray:
        return np.array([self[lab] for lab in VOCABULARY])


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must lie in [0, 1], got {p}")


def transition_distribution(y: ToothLabel, p: float) -> TransitionDistribution:
    """Conditional law of the denoising query label given ground truth ``y``.

    The label is kept with probability ``1 - p``. The flip mass ``p`` goes
    to the position-flipped label, and for a diagnosed anterior tooth it is
    split evenly with the diagnosis-flipped label. Flips that would invent
    a diagnosis for an undiagnosed tooth get zero mass.
    """
    _check_p(p)
    probs = {y: 1.0 - p}
    if y is ToothLabel.POSTERIOR_TEETH:
        flips = {ToothLabel.ANTERIOR_TEETH: p}
    elif y is ToothLabel.ANTERIOR_TEETH:
        flips = {ToothLabel.POSTERIOR_TEETH: p}
    else:
        other = ToothLabel.ANTERIOR_FD if y is ToothLabel.ANTERIOR_NO_FD else ToothLabel.ANTERIOR_NO_FD
        flips = {other: p / 2, ToothLabel.POSTERIOR_TEETH: p / 2}
    for lab, mass in flips.items():
        if mass > 0:
            probs[lab] = mass
    if probs[y] == 0.0:
        del probs[y]
    return TransitionDistribution(y, p, probs)


def uniform_transition_distribution(y: ToothLabel, p: float) -> TransitionDistribution:
    """Attribute-blind flipping: mass ``p`` spread over the three other labels."""
    _check_p(p)
    probs = {lab: p / 3 for lab in VOCABULARY if lab is not y and p > 0}
    if p < 1.0:
        probs[y] = 1.0 - p
    return TransitionDistribution(y, p, probs)


def transition_matrix(p: float, conditional: bool = True) -> np.ndarray:
    """Row-stochastic (T, T) matrix over ``VOCABULARY`` indices."""
    return _transition_matrix(float(p), bool(conditional)).copy()


@functools.lru_cache(maxsize=64)
def _transition_matrix(p: float, conditional: bool) -> np.ndarray:
    fn = transition_distribution if conditional else uniform_transition_distribution
    return np.stack([fn(lab, p).as_vector() for lab in VOCABULARY])


class QueryRole(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class DenoisingQuery:
    label: ToothLabel
    box: BoxCXCYWH
    role: QueryRole
    group_index: int
    source_gt_index: int


@dataclass
class DenoisingBatch:
    """Array form of a denoising query set, ordered group-major."""

    labels: np.ndarray  # (N,) vocabulary indices
    boxes: np.ndarray  # (N, 4) noised cxcywh
    positive: np.ndarray  # (N,) bool
    group_index: np.ndarray
    source_gt_index: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def to_queries(self) -> list[DenoisingQuery]:
        return [
            DenoisingQuery(
                label=VOCABULARY[int(lab)],
                box=BoxCXCYWH.from_array(box),
                role=QueryRole.POSITIVE if pos else QueryRole.NEGATIVE,
                group_index=int(g),
                source_gt_index=int(s),
            )
            for lab, box, pos, g, s in zip(
                self.labels, self.boxes, self.positive, self.group_index, self.source_gt_index
            )
        ]


def sample_denoising_batch(
    gt_labels: Sequence[int] | np.ndarray,
    gt_boxes_cxcywh: np.ndarray,
    p: float,
    num_groups: int,
    lambda1: float,
    lambda2: float,
    rng: np.random.Generator,
    conditional: bool = True,
) -> DenoisingBatch:
    """Vectorized sampler behind :func:`sample_denoising_queries`.

    Labels are drawn first for all groups, then box noise, so the label
    stream does not depend on the box noise magnitudes.
    """
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    gt_labels = np.asarray(gt_labels, dtype=int)
    if gt_labels.size == 0:
        raise ValueError("denoising needs at least one ground-truth box")
    n_gt = gt_labels.size
    trans = transition_matrix(p, conditional)
    cdf = np.cumsum(trans[np.tile(gt_labels, num_groups)], axis=1)
    u = rng.random(n_gt * num_groups)
    labels = np.minimum((u[:, None] >= cdf).sum(axis=1), len(VOCABULARY) - 1)
    # guard against round-off landing on a zero-probability label at the cdf edge
    zero = trans[np.tile(gt_labels, num_groups), labels] == 0
    if np.any(zero):
        labels[zero] = np.tile(gt_labels, num_groups)[zero]
    boxes = jitter_boxes(np.tile(gt_boxes_cxcywh, (num_groups, 1)), lambda1, lambda2, rng)
    source = np.tile(np.arange(n_gt), num_groups)
    return DenoisingBatch(
        labels=labels,
        boxes=boxes,
        positive=labels == gt_labels[source],
        group_index=np.repeat(np.arange(num_groups), n_gt),
        source_gt_index=source,
    )


def sample_denoising_queries(
    gt: Sequence[tuple[ToothLabel, BoxXYXY]],
    p: float = DEFAULT_FLIP_P,
    num_groups: int = 1,
    lambda1: float = 1.0,
    lambda2: float = 0.4,
    rng: np.random.Generator | None = None,
    conditional: bool = True,
) -> list[DenoisingQuery]:
    """Build ``num_groups`` groups of noised (label, box) queries from ``gt``.

    A query whose sampled label equals its source label is a positive
    (it should reconstruct the ground truth); otherwise it is a negative
    (it should be classified as background).
    """
    if rng is None:
        raise ValueError("sample_denoising_queries needs an explicit seeded generator")
    if not gt:
        raise ValueError("denoising needs at least one ground-truth box")
    labels = [lab.index for lab, _ in gt]
    boxes = xyxy_to_cxcywh_array(np.stack([b.as_array() for _, b in gt]))
    batch = sample_denoising_batch(labels, boxes, p, num_groups, lambda1, lambda2, rng, conditional)
    return batch.to_queries()
