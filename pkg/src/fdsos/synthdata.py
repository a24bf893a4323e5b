"""Synthetic frontal dental scenes and COCO JSON round-tripping.

A scene holds two arches of anterior teeth in a central band, flanked
left and right by posterior teeth that sit vertically inside the band.
In the FD-task setting only anterior teeth are annotated (with a
diagnosis); in the public teeth-detection setting every tooth is
annotated with its position label only.

Scenes carry a feature vector instead of pixels: the hidden boxes and
labels are written into fixed per-position slots and mixed by a fixed
orthonormal matrix, plus Gaussian noise. The mixing matrix depends only
on the slot layout, so datasets generated with the same tooth-count
ranges share it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BoxXYXY
from .labelspace import FD_PROMPT, TEETH_PROMPT, ToothLabel

IMAGE_SIZE = 640
SLOT_WIDTH = 6  # present, cx, cy, w, h, diagnosis sign
_ENCODING_SEED = 20240611
# FDTooth train split: 454 healthy vs 626 FD anterior teeth
DEFAULT_FD_FRACTION = 626 / (454 + 626)


class LayoutError(ValueError):
    """Raised when the requested teeth do not fit in the image."""


class CocoFormatError(ValueError):
    """Raised for malformed or inconsistent COCO files."""


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int = 150
    anterior_per_image: tuple[int, int] = (12, 12)
    posterior_per_image: tuple[int, int] = (2, 8)
    fd_fraction: float = DEFAULT_FD_FRACTION
    annotate_posterior: bool = False
    feature_dim: int | None = None
    noise_level: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("anterior_per_image", "posterior_per_image"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a nonempty range, got {(lo, hi)}")
        if self.anterior_per_image[0] < 1:
            raise ValueError("every scene needs at least one anterior tooth")
        if not 0.0 <= self.fd_fraction <= 1.0:
            raise ValueError("fd_fraction must lie in [0, 1]")
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.feature_dim is not None and self.feature_dim < self.raw_dim:
            raise ValueError(f"feature_dim must be >= {self.raw_dim} to keep the encoding invertible")

    @property
    def slot_counts(self) -> tuple[int, int, int, int]:
        """Slots for (left posterior, upper anterior, lower anterior, right posterior)."""
        a, p = self.anterior_per_image[1], self.posterior_per_image[1]
        return math.ceil(p / 2), math.ceil(a / 2), a // 2, math.ceil(p / 2)

    @property
    def raw_dim(self) -> int:
        return sum(self.slot_counts) * SLOT_WIDTH

    @property
    def dim(self) -> int:
        return self.feature_dim if self.feature_dim is not None else self.raw_dim

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("anterior_per_image", "posterior_per_image"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anterior_per_image"] = list(self.anterior_per_image)
        d["posterior_per_image"] = list(self.posterior_per_image)
        return d


@dataclass
class Scene:
    image_id: int
    features: np.ndarray | None
    annotations: list[tuple[ToothLabel, BoxXYXY]]
    hidden_truth: list[tuple[ToothLabel, BoxXYXY]] | None = None
    annotation_complete: bool = False

    @property
    def prompt(self) -> tuple[ToothLabel, ...]:
        return TEETH_PROMPT if self.annotation_complete else FD_PROMPT

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Vocabulary indices (G,) and xyxy boxes (G, 4) of the annotations."""
        labels = np.array([lab.index for lab, _ in self.annotations], dtype=int)
        boxes = np.array([b.as_array() for _, b in self.annotations], dtype=float).reshape(-1, 4)
        return labels, boxes


# ---------------------------------------------------------------------------
# layout


def _row(rng, left, right, top, bottom, n, fill=0.8):
    """``n`` boxes tiling [left, right] with slight random inset."""
    if n == 0:
        return []
    cell = (right - left) / n
    if cell < 0.01 or bottom - top < 0.02:
        raise LayoutError(f"cannot fit {n} teeth in a {right - left:.3f} wide row")
    boxes = []
    for i in range(n):
        slack = cell * (1 - fill)
        x1 = left + i * cell + rng.uniform(0.1, 0.5) * slack
        x2 = left + (i + 1) * cell - rng.uniform(0.1, 0.5) * slack
        y1 = top + rng.uniform(0.0, 0.15) * (bottom - top)
        y2 = bottom - rng.uniform(0.0, 0.15) * (bottom - top)
        boxes.append(np.array([x1, y1, x2, y2]))
    return boxes


def _layout(rng: np.random.Generator, n_ant: int, n_post: int):
    """Return (left posterior, upper anterior, lower anterior, right posterior) box lists."""
    top = rng.uniform(0.28, 0.34)
    bottom = rng.uniform(0.66, 0.72)
    mid = (top + bottom) / 2
    gap = 0.01
    left = rng.uniform(0.22, 0.27)
    right = rng.uniform(0.73, 0.78)

    n_up = math.ceil(n_ant / 2)
    upper = _row(rng, left, right, top, mid - gap / 2, n_up)
    lower = _row(rng, left, right, mid + gap / 2, bottom, n_ant - n_up)
    ant = np.stack(upper + lower)
    e_left, e_right = ant[:, 0].min(), ant[:, 2].max()
    e_top, e_bottom = ant[:, 1].min(), ant[:, 3].max()

    # posterior teeth: strictly beside the anterior region, strictly inside its band
    p_top = e_top + 0.03
    p_bottom = e_bottom - 0.03
    p_mid = (p_top + p_bottom) / 2
    n_left = math.ceil(n_post / 2)
    flanks = []
    for n_side, (x_lo, x_hi) in ((n_left, (0.02, e_left - 0.01)), (n_post - n_left, (e_right + 0.01, 0.98))):
        cols = math.ceil(n_side / 2)
        side = _row(rng, x_lo, x_hi, p_top, p_mid - gap / 2, cols) + _row(
            rng, x_lo, x_hi, p_mid + gap / 2, p_bottom, n_side - cols
        )
        flanks.append(side)
    return flanks[0], upper, lower, flanks[1]


def _encoding_matrix(raw_dim: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([_ENCODING_SEED, raw_dim, dim])
    q, _ = np.linalg.qr(rng.standard_normal((dim, raw_dim)))
    return q  # orthonormal columns


def encode_slots(groups, labels, spec: DatasetSpec) -> np.ndarray:
    """Raw slot vector: per slot (present, cx, cy, w, h, diagnosis sign)."""
    raw = np.zeros(spec.raw_dim)
    base = 0
    for boxes, labs, n_slots in zip(groups, labels, spec.slot_counts):
        for k, (b, lab) in enumerate(zip(boxes, labs)):
            o = (base + k) * SLOT_WIDTH
            raw[o] = 1.0
            raw[o + 1 : o + 5] = [(b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1]]
            raw[o + 5] = {ToothLabel.ANTERIOR_FD: 1.0, ToothLabel.ANTERIOR_NO_FD: -1.0}.get(lab, 0.0)
        base += n_slots
    return raw


def decode_boxes(features: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Linear decode of the present slots' boxes (xyxy), in slot order."""
    raw = _encoding_matrix(spec.raw_dim, spec.dim).T @ features
    slots = raw.reshape(-1, SLOT_WIDTH)
    present = slots[:, 0] > 0.5
    cx, cy, w, h = slots[present, 1:5].T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def generate(spec: DatasetSpec) -> list[Scene]:
    """Generate ``spec.num_images`` scenes; identical specs give identical scenes."""
    enc = _encoding_matrix(spec.raw_dim, spec.dim)
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_images)
    scenes = []
    for image_id, child in enumerate(children):
        rng = np.random.default_rng(child)
        n_ant = int(rng.integers(spec.anterior_per_image[0], spec.anterior_per_image[1] + 1))
        n_post = int(rng.integers(spec.posterior_per_image[0], spec.posterior_per_image[1] + 1))
        left, upper, lower, right = _layout(rng, n_ant, n_post)
        ant_labels = [
            ToothLabel.ANTERIOR_FD if rng.random() < spec.fd_fraction else ToothLabel.ANTERIOR_NO_FD
            for _ in range(n_ant)
        ]
        up_labels, low_labels = ant_labels[: len(upper)], ant_labels[len(upper) :]
        post = ToothLabel.POSTERIOR_TEETH
        groups = (left, upper, lower, right)
        labels = ([post] * len(left), up_labels, low_labels, [post] * len(right))

        raw = encode_slots(groups, labels, spec)
        features = enc @ raw + spec.noise_level * rng.standard_normal(spec.dim)

        hidden = [(lab, BoxXYXY.from_array(b)) for bs, ls in zip(groups, labels) for b, lab in zip(bs, ls)]
        anterior = [(lab, BoxXYXY.from_array(b)) for b, lab in zip(upper + lower, ant_labels)]
        if spec.annotate_posterior:
            posterior = [(post, BoxXYXY.from_array(b)) for b in left + right]
            annotations = [(ToothLabel.ANTERIOR_TEETH, b) for _, b in anterior] + posterior
        else:
            annotations = anterior
        scenes.append(Scene(image_id, features, annotations, hidden, spec.annotate_posterior))
    return scenes


def split(scenes: Sequence[Scene], fractions=(0.7, 0.1, 0.2)) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """Deterministic train/val/test split in scene order, applied per task.

    Fully and partially annotated scenes are split separately so that a
    merged multi-task dataset keeps both tasks in every part.
    """
    parts: tuple[list[Scene], list[Scene], list[Scene]] = ([], [], [])
    for complete in (False, True):
        group = [s for s in scenes if s.annotation_complete is complete]
        n = len(group)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        parts[0].extend(group[:n_train])
        parts[1].extend(group[n_train : n_train + n_val])
        parts[2].extend(group[n_train + n_val :])
    return parts


def generate_multitask(spec: DatasetSpec, num_public: int) -> list[Scene]:
    """FD scenes from ``spec`` followed by ``num_public`` fully annotated teeth scenes.

    The public part reuses the layout parameters (so features share one
    encoding) with a different seed; image ids are consecutive.
    """
    fd = generate(replace(spec, annotate_posterior=False))
    if num_public < 0:
        raise ValueError("num_public must be >= 0")
    public = []
    if num_public:
        public = generate(replace(spec, annotate_posterior=True, num_images=num_public, seed=spec.seed + 1))
    return renumber(fd + public)


def renumber(scenes: Sequence[Scene], start: int = 0) -> list[Scene]:
    """Copies of ``scenes`` with consecutive image ids (for merging datasets)."""
    return [
        Scene(start + i, s.features, s.annotations, s.hidden_truth, s.annotation_complete)
        for i, s in enumerate(scenes)
    ]


# ---------------------------------------------------------------------------
# COCO JSON


def _category_id(label: ToothLabel) -> int:
    return label.index + 1


def to_coco(scenes: Sequence[Scene], width: int = IMAGE_SIZE, height: int = IMAGE_SIZE, info: dict | None = None) -> dict:
    tasks = []
    for s in scenes:
        if s.prompt not in tasks:
            tasks.append(s.prompt)
    labels = [lab for task in tasks for lab in task]
    images, anns = [], []
    for s in scenes:
        img = {
            "id": s.image_id,
            "width": width,
            "height": height,
            "file_name": f"synthetic_{s.image_id:05d}.png",
            "annotation_complete": s.annotation_complete,
        }
        if s.features is not None:
            img["features"] = [float(v) for v in s.features]
        images.append(img)
        for lab, b in s.annotations:
            x, y = b.x1 * width, b.y1 * height
            w, h = (b.x2 - b.x1) * width, (b.y2 - b.y1) * height
            anns.append(
                {
                    "id": len(anns) + 1,
                    "image_id": s.image_id,
                    "category_id": _category_id(lab),
                    "bbox": [x, y, w, h],
                    "area": w * h,
                    "iscrowd": 0,
                }
            )
    out = {
        "images": images,
        "annotations": anns,
        "categories": [{"id": _category_id(lab), "name": lab.prompt} for lab in labels],
    }
    if info is not None:
        out["info"] = info
    return out


def save_coco(scenes: Sequence[Scene], path, info: dict | None = None) -> None:
    text = json.dumps(to_coco(scenes, info=info), indent=1)
    Path(path).write_text(text + "\n")


def categories_from_coco(doc: dict) -> dict[int, ToothLabel]:
    try:
        return {int(c["id"]): ToothLabel.from_prompt(c["name"]) for c in doc["categories"]}
    except ValueError as exc:
        raise CocoFormatError(str(exc)) from None
    except (KeyError, TypeError) as exc:
        raise CocoFormatError(f"malformed categories: {exc}") from None


def coco_box(bbox, width: float, height: float) -> BoxXYXY:
    x, y, w, h = (float(v) for v in bbox)
    tol = 1e-6
    if w <= 0 or h <= 0:
        raise CocoFormatError(f"degenerate bbox {bbox}")
    if x < -tol or y < -tol or x + w > width + tol or y + h > height + tol:
        raise CocoFormatError(f"bbox {bbox} outside the {width}x{height} image")
    clamp = lambda v: min(max(v, 0.0), 1.0)  # noqa: E731
    return BoxXYXY(clamp(x / width), clamp(y / height), clamp((x + w) / width), clamp((y + h) / height))


def from_coco(doc: dict) -> list[Scene]:
    if not isinstance(doc, dict) or not {"images", "annotations", "categories"} <= doc.keys():
        raise CocoFormatError("expected top-level keys images, annotations, categories")
    cats = categories_from_coco(doc)
    scenes: dict[int, Scene] = {}
    sizes: dict[int, tuple[float, float]] = {}
    try:
        for img in doc["images"]:
            iid = int(img["id"])
            feats = img.get("features")
            scenes[iid] = Scene(
                iid,
                np.asarray(feats, dtype=float) if feats is not None else None,
                [],
                None,
                bool(img.get("annotation_complete", False)),
            )
            sizes[iid] = (float(img["width"]), float(img["height"]))
        for ann in doc["annotations"]:
            iid = int(ann["image_id"])
            if iid not in scenes:
                raise CocoFormatError(f"annotation {ann.get('id')} refers to unknown image {iid}")
            cid = int(ann["category_id"])
            if cid not in cats:
                raise CocoFormatError(f"annotation {ann.get('id')} has unknown category {cid}")
            scenes[iid].annotations.append((cats[cid], coco_box(ann["bbox"], *sizes[iid])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CocoFormatError):
            raise
        raise CocoFormatError(f"malformed COCO record: {exc}") from None
    return list(scenes.values())


def load_coco(path) -> list[Scene]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}: invalid JSON ({exc})") from None
    return from_coco(doc)

