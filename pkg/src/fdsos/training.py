"""Gradient-descent training of the toy detector and model evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .evaluation import DetectionRecord, EvalReport, coco_ap
from .geometry import BoxXYXY, clip_xyxy_array, cxcywh_to_xyxy_array, xyxy_to_cxcywh_array
from .labelspace import FD_PROMPT, TEETH_PROMPT, VOCABULARY, DenoisingBatch, ToothLabel, sample_denoising_batch
from .losses import LossConfig, LossResult, sigmoid, total_loss
from .matching import Assignment, CostWeights, match_arrays
from .model import ToyDetector
from .synthdata import Scene, split

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    p: float = 0.5
    num_denoising_groups: int = 2
    tma_enabled: bool = True
    ccdn_enabled: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    num_queries: int = 20
    embed_dim: int = 32
    hidden_dim: int = 128
    dn_hidden_dim: int = 64
    lambda1: float = 1.0
    lambda2: float = 0.4
    lr_drops: tuple[float, ...] = ()  # fractions of steps at which lr is divided by 10

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.num_denoising_groups < 0:
            raise ValueError("num_denoising_groups must be >= 0")
        object.__setattr__(self, "lr_drops", tuple(float(f) for f in self.lr_drops))
        if any(not 0 <= f <= 1 for f in self.lr_drops):
            raise ValueError("lr_drops must be fractions in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        weights = CostWeights(**d.pop("weights", {}))
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(loss=loss, weights=weights, **known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    step: int
    total: float
    cls: float
    box: float
    dn: float


@dataclass
class ScenePlan:
    """Everything sampled for one scene in one step: matching and denoising queries."""

    assignment: Assignment
    dn_batch: DenoisingBatch | None


# ---------------------------------------------------------------------------
# composed loss


def plan_scene(
    logits: np.ndarray,
    boxes: np.ndarray,
    scene: Scene,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ScenePlan:
    labels, gt_xyxy = scene.gt_arrays()
    pred_xyxy = clip_xyxy_array(cxcywh_to_xyxy_array(boxes))
    assignment = match_arrays(
        sigmoid(logits),
        pred_xyxy,
        labels,
        gt_xyxy,
        cfg.weights,
        tma_enabled=cfg.tma_enabled,
        annotation_complete=scene.annotation_complete,
    )
    dn_batch = None
    if cfg.num_denoising_groups > 0 and labels.size:
        dn_batch = sample_denoising_batch(
            labels,
            xyxy_to_cxcywh_array(gt_xyxy),
            cfg.p,
            cfg.num_denoising_groups,
            cfg.lambda1,
            cfg.lambda2,
            rng,
            conditional=cfg.ccdn_enabled,
        )
    return ScenePlan(assignment, dn_batch)


def batch_loss(
    model: ToyDetector,
    scenes: Sequence[Scene],
    plans: Sequence[ScenePlan],
    loss_cfg: LossConfig,
    cache: dict | None = None,
) -> tuple[float, list[LossResult], dict]:
    """Mean scene loss over a batch for fixed plans, with parameter gradients."""
    if cache is None:
        cache = model.forward_batch(np.stack([s.features for s in scenes]))
    n = len(scenes)
    d_logits = np.zeros_like(cache["logits"])
    d_boxes = np.zeros_like(cache["boxes"])
    dn_terms = []
    results = []
    for i, (scene, plan) in enumerate(zip(scenes, plans)):
        labels, gt_xyxy = scene.gt_arrays()
        gt = xyxy_to_cxcywh_array(gt_xyxy)
        dn_cache = None
        if plan.dn_batch is not None:
            dn_cache = model.forward_denoising(cache["hidden"][i], plan.dn_batch.labels, plan.dn_batch.boxes)
        res = total_loss(
            cache["logits"][i],
            cache["boxes"][i],
            plan.assignment,
            labels,
            gt,
            loss_cfg,
            prompt=scene.prompt if loss_cfg.prompt_scoped else None,
            dn_logits=dn_cache["logits"] if dn_cache else None,
            dn_boxes=dn_cache["boxes"] if dn_cache else None,
            dn_batch=plan.dn_batch,
        )
        results.append(res)
        d_logits[i] = res.grad_logits / n
        d_boxes[i] = res.grad_boxes / n
        if dn_cache is not None:
            dn_terms.append((i, dn_cache, res.grad_dn_logits / n, res.grad_dn_boxes / n))
    grads = model.backward(cache, d_logits, d_boxes, dn_terms)
    return float(np.mean([r.total for r in results])), results, grads


# ---------------------------------------------------------------------------
# training


def train_model(
    train_scenes: Sequence[Scene],
    cfg: TrainConfig,
    model: ToyDetector | None = None,
) -> tuple[ToyDetector, list[TraceRow]]:
    """Run ``cfg.steps`` plain gradient-descent steps on ``train_scenes``."""
    if not train_scenes:
        raise ValueError("empty training set")
    feature_dim = len(train_scenes[0].features)
    if model is None:
        model = ToyDetector.init(
            feature_dim,
            cfg.num_queries,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.dn_hidden_dim,
            seed=cfg.seed,
            feature_mean=np.mean([s.features for s in train_scenes], axis=0),
        )
    else:
        model = model.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    trace = []
    n = len(train_scenes)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        scenes = [train_scenes[i] for i in idx]
        cache = model.forward_batch(np.stack([s.features for s in scenes]))
        if not (np.isfinite(cache["logits"]).all() and np.isfinite(cache["boxes"]).all()):
            raise DivergenceError(f"non-finite predictions at step {step}; lower the learning rate")
        plans = [plan_scene(cache["logits"][k], cache["boxes"][k], s, cfg, rng) for k, s in enumerate(scenes)]
        loss, results, grads = batch_loss(model, scenes, plans, cfg.loss, cache)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}; lower the learning rate")
        trace.append(
            TraceRow(
                step,
                loss,
                float(np.mean([r.cls for r in results])),
                float(np.mean([r.box for r in results])),
                float(np.mean([r.dn for r in results])),
            )
        )
        lr = cfg.lr * 0.1 ** sum(step >= f * cfg.steps for f in cfg.lr_drops)
        for k, g in grads.items():
            model.params[k] -= lr * g
        if step % 500 == 0:
            log.debug("step %d loss %.4f", step, loss)
    return model, trace


def train(
    dataset: Sequence[Scene],
    cfg: TrainConfig,
) -> tuple[ToyDetector, list[TraceRow], EvalReport]:
    """Split 70/10/20, train on the first part, evaluate on the held-out test part."""
    train_s, _, test_s = split(dataset)
    model, trace = train_model(train_s, cfg)
    return model, trace, evaluate(model, test_s or train_s)


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "cls", "box", "dn"])
        for r in trace:
            w.writerow([r.step, repr(r.total), repr(r.cls), repr(r.box), repr(r.dn)])


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(model: ToyDetector, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (Q, T) and clipped xyxy boxes (Q, 4)."""
    logits, boxes = model.forward(scene.features)
    xyxy = clip_xyxy_array(cxcywh_to_xyxy_array(boxes))
    return sigmoid(logits), xyxy


def _safe_box(b: np.ndarray) -> BoxXYXY:
    x1, y1, x2, y2 = b
    if x2 - x1 < 1e-6:
        x1, x2 = min(x1, 1 - 1e-6), min(x1, 1 - 1e-6) + 1e-6
    if y2 - y1 < 1e-6:
        y1, y2 = min(y1, 1 - 1e-6), min(y1, 1 - 1e-6) + 1e-6
    return BoxXYXY(float(x1), float(y1), float(x2), float(y2))


def detection_records(model: ToyDetector, scenes: Sequence[Scene]) -> list[DetectionRecord]:
    """One record per (query, vocabulary token) per scene."""
    out = []
    for s in scenes:
        scores, boxes = predict(model, s)
        for q in range(scores.shape[0]):
            box = _safe_box(boxes[q])
            for t, lab in enumerate(VOCABULARY):
                out.append(DetectionRecord(s.image_id, lab, box, float(scores[q, t])))
    return out


def ground_truth_records(scenes: Sequence[Scene]) -> list[DetectionRecord]:
    return [DetectionRecord(s.image_id, lab, b) for s in scenes for lab, b in s.annotations]


def evaluate(model: ToyDetector, scenes: Sequence[Scene], task: str | None = None) -> EvalReport:
    """Evaluate on the FD task (anterior diagnosis, posterior output excluded)
    or the teeth task (position detection).

    ``task`` defaults to ``"fd"`` when any scene has incomplete annotation.
    """
    if task is None:
        task = "fd" if any(not s.annotation_complete for s in scenes) else "teeth"
    if task == "fd":
        scenes = [s for s in scenes if not s.annotation_complete]
        return coco_ap(
            detection_records(model, scenes),
            ground_truth_records(scenes),
            FD_PROMPT,
            ToothLabel.ANTERIOR_FD,
            exclude_posterior_output=True,
        )
    if task == "teeth":
        scenes = [s for s in scenes if s.annotation_complete]
        return coco_ap(detection_records(model, scenes), ground_truth_records(scenes), TEETH_PROMPT, None)
    raise ValueError(f"unknown task {task!r}")


def posterior_confidence(model: ToyDetector, scenes: Sequence[Scene], tokens=VOCABULARY) -> tuple[float, int]:
    """Mean over in-mask predictions of the max score over ``tokens``.

    The mask is built from each scene's anterior annotations. Returns the
    mean and the number of predictions it averages.
    """
    from .matching import anterior_extremities, posterior_mask
    from .labelspace import attributes

    cols = [lab.index for lab in tokens]
    vals = []
    for s in scenes:
        ant = [b for lab, b in s.annotations if attributes(lab)[0] == 1]
        if not ant:
            continue
        scores, boxes = predict(model, s)
        m = posterior_mask(boxes, anterior_extremities(ant))
        vals.extend(scores[m][:, cols].max(1).tolist())
    return (float(np.mean(vals)) if vals else float("nan")), len(vals)


# ---------------------------------------------------------------------------
# ablation

ABLATION_CELLS = (
    ("baseline", False, False),
    ("+TMA", True, False),
    ("+CCDN", False, True),
    ("+both", True, True),
)


@dataclass
class AblationRow:
    setting: str
    tma: bool
    ccdn: bool
    report: EvalReport
    confidence: float

    def as_dict(self) -> dict:
        return {
            "setting": self.setting,
            "tma": self.tma,
            "ccdn": self.ccdn,
            "AP": self.report.AP,
            "AP50": self.report.AP50,
            "AP_FD": self.report.AP_FD,
            "AP50_FD": self.report.AP50_FD,
            "posterior_confidence": self.confidence,
        }


def ablate(dataset: Sequence[Scene], cfg: TrainConfig) -> list[AblationRow]:
    """Train the TMA x CCDN grid with identical seeds; evaluate on the test split."""
    train_s, _, test_s = split(dataset)
    task = "fd" if any(not s.annotation_complete for s in test_s) else "teeth"
    scored = [s for s in test_s if s.annotation_complete is (task == "teeth")]
    rows = []
    for name, tma, ccdn in ABLATION_CELLS:
        model, _ = train_model(train_s, replace(cfg, tma_enabled=tma, ccdn_enabled=ccdn))
        conf, _ = posterior_confidence(model, scored)
        rows.append(AblationRow(name, tma, ccdn, evaluate(model, test_s, task), conf))
    return rows
