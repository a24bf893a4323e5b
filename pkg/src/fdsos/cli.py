"""Command-line interface.

Subcommands::

    synth      dataset spec -> COCO JSON (features embedded per image)
    train      dataset/config -> model JSON, loss trace CSV, held-out report
    eval       model or predictions + dataset -> report JSON, PR CSV, optional SVG
    match      one scene -> assignment JSON
    dn-sample  one scene's ground truth -> denoising query dump
    ablate     TMA x CCDN grid -> comparison table

Every subcommand takes ``--seed``, ``--config`` (JSON or YAML) and
``--out`` (output directory). Usage errors and missing files exit with 2,
other failures with 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .evaluation import DetectionRecord, coco_ap
from .geometry import xyxy_to_cxcywh_array
from .labelspace import FD_PROMPT, TEETH_PROMPT, VOCABULARY, ToothLabel, sample_denoising_batch
from .matching import CostWeights, match_arrays
from .model import ToyDetector
from .synthdata import (
    CocoFormatError,
    DatasetSpec,
    Scene,
    coco_box,
    from_coco,
    generate,
    generate_multitask,
    load_coco,
    save_coco,
    split,
)
from .training import (
    DivergenceError,
    TrainConfig,
    ablate,
    evaluate,
    ground_truth_records,
    predict,
    train,
    write_trace_csv,
)

log = logging.getLogger("fdsos")


class UsageError(Exception):
    """Bad arguments or missing inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(p.read_text())  # YAML is a superset of JSON
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    return doc


def _section(cfg: dict, key: str) -> dict:
    sec = cfg.get(key, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section {key!r} must be a mapping")
    return sec


def _dataset_spec(args, cfg: dict) -> DatasetSpec:
    d = dict(_section(cfg, "dataset"))
    for key in ("num_images", "noise_level", "fd_fraction", "feature_dim"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "annotate_posterior", False):
        d["annotate_posterior"] = True
    if args.seed is not None:
        d["seed"] = args.seed
    return DatasetSpec.from_dict(d)


def _num_public(args, cfg: dict) -> int:
    v = getattr(args, "num_public", None)
    return int(v if v is not None else cfg.get("num_public", 0))


def _train_config(args, cfg: dict) -> TrainConfig:
    d = dict(_section(cfg, "train"))
    for key in ("lr", "steps", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "no_tma", False):
        d["tma_enabled"] = False
    if getattr(args, "no_ccdn", False):
        d["ccdn_enabled"] = False
    return TrainConfig.from_dict(d)


def _dataset(args, cfg: dict) -> list[Scene]:
    if getattr(args, "data", None):
        return _read_scenes(args.data)
    spec = _dataset_spec(args, cfg)
    n_pub = _num_public(args, cfg)
    return generate_multitask(spec, n_pub) if n_pub else generate(spec)


def _read_scenes(path: str) -> list[Scene]:
    if not Path(path).is_file():
        raise UsageError(f"dataset file not found: {path}")
    return load_coco(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _scene(scenes: list[Scene], image_id: int | None) -> Scene:
    if image_id is None:
        return scenes[0]
    for s in scenes:
        if s.image_id == image_id:
            return s
    raise UsageError(f"no image with id {image_id}")


def _require_features(scenes: list[Scene]) -> None:
    if any(s.features is None for s in scenes):
        raise UsageError("dataset images carry no feature vectors (write it with `fdsos synth`)")


def _image_sizes(data_path: str) -> dict[int, tuple[float, float]]:
    doc = json.loads(Path(data_path).read_text())
    return {int(img["id"]): (float(img["width"]), float(img["height"])) for img in doc["images"]}


def _read_predictions(path: str, sizes: dict[int, tuple[float, float]]) -> list[DetectionRecord]:
    """COCO results list, or a COCO dataset (treated as score-1 detections).

    Result boxes are absolute ``[x, y, w, h]`` in the image size declared
    by the evaluated dataset.
    """
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"predictions file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict):
        return ground_truth_records(from_coco(doc))
    if not isinstance(doc, list):
        raise CocoFormatError("predictions must be a COCO results list or a COCO dataset")
    cats = {lab.index + 1: lab for lab in VOCABULARY}
    out = []
    try:
        for r in doc:
            iid = int(r["image_id"])
            if iid not in sizes:
                raise CocoFormatError(f"prediction for unknown image {iid}")
            lab = cats.get(int(r["category_id"]))
            if lab is None:
                raise CocoFormatError(f"unknown category id {r['category_id']}")
            out.append(DetectionRecord(iid, lab, coco_box(r["bbox"], *sizes[iid]), float(r["score"])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CocoFormatError):
            raise
        raise CocoFormatError(f"malformed prediction record: {exc}") from None
    return out


def _prompt_for(task: str):
    return FD_PROMPT if task == "fd" else TEETH_PROMPT


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg) -> int:
    spec = _dataset_spec(args, cfg)
    n_pub = _num_public(args, cfg)
    scenes = generate_multitask(spec, n_pub) if n_pub else generate(spec)
    path = _out_dir(args) / args.name
    save_coco(scenes, path, info={"spec": spec.to_dict(), "num_public": n_pub})
    print(f"wrote {len(scenes)} scenes to {path}")
    return 0


def cmd_train(args, cfg) -> int:
    scenes = _dataset(args, cfg)
    _require_features(scenes)
    tcfg = _train_config(args, cfg)
    model, trace, report = train(scenes, tcfg)
    out = _out_dir(args)
    model.save(out / "model.json")
    write_trace_csv(trace, out / "trace.csv")
    _write_json(out / "train_report.json", {"config": tcfg.to_dict(), "report": report.to_json()})
    if args.svg:
        from .plotting import plot_trace

        plot_trace(
            [r.step for r in trace],
            {k: [getattr(r, k) for r in trace] for k in ("total", "cls", "box", "dn")},
            out / "trace.svg",
        )
    print(f"AP {report.AP:.4f}  AP50 {report.AP50:.4f}  AP75 {report.AP75:.4f}")
    return 0


def cmd_eval(args, cfg) -> int:
    scenes = _read_scenes(args.data)
    if args.split == "test":
        scenes = split(scenes)[2]
    if (args.model is None) == (args.predictions is None):
        raise UsageError("eval needs exactly one of --model or --predictions")
    if args.model is not None:
        if not Path(args.model).is_file():
            raise UsageError(f"model file not found: {args.model}")
        _require_features(scenes)
        report = evaluate(ToyDetector.load(args.model), scenes, args.task)
    else:
        preds = _read_predictions(args.predictions, _image_sizes(args.data))
        task = args.task or ("fd" if any(not s.annotation_complete for s in scenes) else "teeth")
        complete = task == "teeth"
        scored = [s for s in scenes if s.annotation_complete is complete]
        ids = {s.image_id for s in scored}
        report = coco_ap(
            [r for r in preds if r.image_id in ids],
            ground_truth_records(scored),
            _prompt_for(task),
            ToothLabel.ANTERIOR_FD if task == "fd" else None,
            exclude_posterior_output=task == "fd",
        )
    out = _out_dir(args)
    _write_json(out / "report.json", report.to_json())
    report.write_pr_csv(out / "pr.csv")
    if args.svg:
        from .plotting import plot_pr_curves

        plot_pr_curves(report, out / "pr.svg")
    print(f"AP {report.AP:.4f}  AP50 {report.AP50:.4f}  AP75 {report.AP75:.4f}")
    if report.AP_FD is not None:
        print(f"AP_FD {report.AP_FD:.4f}  AP50_FD {report.AP50_FD:.4f}  AP75_FD {report.AP75_FD:.4f}")
    return 0


def cmd_match(args, cfg) -> int:
    scene = _scene(_read_scenes(args.data), args.image_id)
    weights = CostWeights(**_section(cfg, "weights"))
    if args.model is not None:
        if not Path(args.model).is_file():
            raise UsageError(f"model file not found: {args.model}")
        _require_features([scene])
        scores, boxes = predict(ToyDetector.load(args.model), scene)
    else:
        # untrained model from the seed: a reproducible stand-in detector
        _require_features([scene])
        model = ToyDetector.init(len(scene.features), seed=args.seed or 0)
        scores, boxes = predict(model, scene)
    labels, gt = scene.gt_arrays()
    a = match_arrays(scores, boxes, labels, gt, weights, not args.no_tma, scene.annotation_complete)
    doc = {"image_id": scene.image_id, "total_cost": a.total_cost, "predictions": a.to_json()}
    _write_json(_out_dir(args) / "assignment.json", doc)
    counts = {o: sum(r["outcome"] == o for r in doc["predictions"]) for o in ("matched", "negative", "nocare")}
    print(" ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def cmd_dn_sample(args, cfg) -> int:
    scene = _scene(_read_scenes(args.data), args.image_id)
    labels, gt = scene.gt_arrays()
    if labels.size == 0:
        raise UsageError(f"image {scene.image_id} has no annotations")
    rng = np.random.default_rng(args.seed or 0)
    batch = sample_denoising_batch(
        labels, xyxy_to_cxcywh_array(gt), args.p, args.groups, args.lambda1, args.lambda2, rng,
        conditional=not args.uniform,
    )
    rows = [
        {
            "group": q.group_index,
            "source_gt_index": q.source_gt_index,
            "source_label": VOCABULARY[labels[q.source_gt_index]].prompt,
            "label": q.label.prompt,
            "role": q.role.value,
            "box_cxcywh": list(q.box.as_array().tolist()),
        }
        for q in batch.to_queries()
    ]
    _write_json(_out_dir(args) / "denoising.json", {"image_id": scene.image_id, "p": args.p, "queries": rows})
    n_neg = sum(r["role"] == "negative" for r in rows)
    print(f"{len(rows)} queries, {n_neg} negative")
    return 0


def cmd_ablate(args, cfg) -> int:
    scenes = _dataset(args, cfg)
    _require_features(scenes)
    rows = ablate(scenes, _train_config(args, cfg))
    cols = ["setting", "tma", "ccdn", "AP", "AP50", "AP_FD", "AP50_FD", "posterior_confidence"]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = r.as_dict()
        w.writerow([f"{d[c]:.4f}" if isinstance(d[c], float) else d[c] for c in cols])
    (_out_dir(args) / "ablation.tsv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--config", default=None, help="JSON or YAML config file")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fdsos", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--num-images", dest="num_images", type=int)
        p.add_argument("--noise-level", dest="noise_level", type=float)
        p.add_argument("--fd-fraction", dest="fd_fraction", type=float)
        p.add_argument("--feature-dim", dest="feature_dim", type=int)
        p.add_argument("--annotate-posterior", action="store_true", help="public-dataset analog")
        p.add_argument("--num-public", dest="num_public", type=int, help="append fully annotated scenes")

    def train_flags(p):
        p.add_argument("--data", help="COCO dataset written by synth (default: generate from config)")
        p.add_argument("--lr", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic COCO dataset")
    data_flags(p)
    p.add_argument("--name", default="dataset.json", help="output file name inside --out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the toy detector")
    data_flags(p)
    train_flags(p)
    p.add_argument("--no-tma", action="store_true")
    p.add_argument("--no-ccdn", action="store_true", help="uniform label flipping instead")
    p.add_argument("--svg", action="store_true", help="also plot the loss trace")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model or a predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--predictions", help="COCO results list, or a COCO dataset (score-1 detections)")
    p.add_argument("--task", choices=("fd", "teeth"))
    p.add_argument("--split", choices=("all", "test"), default="all")
    p.add_argument("--svg", action="store_true", help="also plot the PR curves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", parents=[common], help="match one scene's predictions to its ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", dest="image_id", type=int)
    p.add_argument("--model", help="trained model (default: untrained model from --seed)")
    p.add_argument("--no-tma", action="store_true")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("dn-sample", parents=[common], help="dump denoising queries for one scene")
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", dest="image_id", type=int)
    p.add_argument("--p", type=float, default=0.5, help="label flip probability")
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.4)
    p.add_argument("--uniform", action="store_true", help="uniform flipping baseline")
    p.set_defaults(func=cmd_dn_sample)

    p = sub.add_parser("ablate", parents=[common], help="run the TMA x CCDN grid")
    data_flags(p)
    train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fdsos {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CocoFormatError, DivergenceError, ValueError, TypeError) as exc:
        print(f"fdsos {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
