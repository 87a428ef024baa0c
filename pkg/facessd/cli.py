"""
facessd command line.

Usage:
    python run_facessd.py gen --out data/
    python run_facessd.py train --config run.json --pipeline --data data/ --out runs/
    python run_facessd.py eval --weights runs/step4_analysis.fssd --data data/ --task smile
    python run_facessd.py predict --weights runs/step4_analysis.fssd --image img.ppm --dump-heatmaps out/img
    python run_facessd.py selftest
    python run_facessd.py serve --weights runs/step4_analysis.fssd --port 8000

Errors are reported on stderr as one line ``error: <kind>: <message>`` with
exit code 2.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from .anchors import DefaultBoxGrid
from .augment import normalize
from .data import compute_stats, generate_dataset, load_dataset, read_ppm, select_split
from .errors import ConfigError, FaceSSDError, UsageError
from .infer import candidates, dump_heatmaps, finalize, format_detections, run_model, tune_face_threshold, tune_task_threshold
from .log_setup import configure_logging
from .metrics import (
    detection_report, detection_scores, gt_predictions, match_detections_to_gt, per_attribute_accuracy,
    roc_points, va_report, write_report
)
from .model import build_model, initialize_from, load_model, load_weights, save_weights
from .models import DatasetStats, Phase, RunConfig, SyntheticSpec, TaskName
from .trainer import run_four_step_pipeline, train_phase

logger = logging.getLogger("facessd.cli")

EXIT_OK = 0
EXIT_ERROR = 2


# -- configuration ----------------------------------------------------------------------------

def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    return RunConfig.model_validate_json(config_path.read_text(encoding="utf-8"))


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flags win over file values; the result is validated again."""
    raw = cfg.model_dump(mode="json")
    seed = getattr(args, "seed", None)
    if seed is not None:
        raw["seed"] = seed
        raw["data"]["seed"] = seed
        raw["detection"]["seed"] = seed
        raw["analysis"]["seed"] = seed
        raw["augment"]["seed"] = seed
    threads = getattr(args, "threads", None)
    if threads is not None:
        raw["detection"]["num_workers"] = threads
        raw["analysis"]["num_workers"] = threads
    if getattr(args, "data", None):
        raw["paths"]["data_dir"] = args.data
    if getattr(args, "out", None):
        raw["paths"]["out_dir"] = args.out
    if getattr(args, "weights", None):
        raw["paths"]["weights"] = args.weights
    return RunConfig.model_validate(raw)


def require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def require_dataset(root: Path) -> Path:
    root = Path(root)
    if not (root / "annotations.txt").is_file():
        raise ConfigError(f"no dataset at {root} (missing annotations.txt)")
    return root


def stats_for(manifest_stats: Optional[DatasetStats], images) -> DatasetStats:
    return manifest_stats if manifest_stats is not None else compute_stats(images)


# -- subcommands ---------------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    spec = cfg.data
    if args.spec:
        spec_path = require_file(Path(args.spec), "spec file")
        spec = SyntheticSpec.model_validate_json(spec_path.read_text(encoding="utf-8"))
        if args.seed is not None:
            spec = spec.model_copy(update={"seed": args.seed})
    out = Path(args.out or cfg.paths.data_dir)
    images, manifest = generate_dataset(spec, out)
    counts = {split: list(manifest.splits.values()).count(split) for split in ("train", "val", "test")}
    print(f"generated {len(images)} images in {out} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    if args.task:
        raw = cfg.model_dump(mode="json")
        raw["head"]["tasks"] = [args.task]
        cfg = RunConfig.model_validate(raw)
    if not args.pipeline and args.phase is None:
        raise ConfigError("train needs --phase or --pipeline")
    data_dir = require_dataset(cfg.paths.data_dir)
    init = require_file(cfg.paths.weights, "weights file") if cfg.paths.weights else None
    out = Path(cfg.paths.out_dir)

    images, manifest = load_dataset(data_dir)
    train = select_split(images, manifest, "train")
    stats = compute_stats(train)

    if args.pipeline:
        _, written = run_four_step_pipeline(cfg, train, out, init_weights=init, stats=stats)
        for step, path in sorted(written.items()):
            print(f"step {step}: {path}")
        return EXIT_OK

    phase = Phase(args.phase)
    if init is not None and phase == Phase.ANALYSIS:
        model, _ = load_model(init)
    else:
        model = build_model(cfg.head, cfg.channel_scale, cfg.seed)
        if init is not None:
            initialize_from(model, load_weights(init)[1])
    phase_cfg = cfg.detection if phase == Phase.DETECTION else cfg.analysis
    train_phase(model, train, phase_cfg, cfg.augment, stats, out)
    path = save_weights(model, out / f"{phase.value}.fssd", stats)
    print(f"{phase.value}: {path}")
    return EXIT_OK


def _detect_all(model, images, stats: DatasetStats, cfg) -> List:
    grid = DefaultBoxGrid()
    results = []
    for sample in images:
        volumes = run_model(model, normalize(sample.image, stats))
        results.append(finalize(candidates(volumes, grid, cfg.th_face), model.head, cfg))
    return results


def task_metrics(head, task: TaskName, images, detections, iou_min: float) -> Dict[str, float]:
    """Accuracy (binary tasks, undetected faces predicted 0) or VA scores over matched faces."""
    seg = next(s for s in head.segments() if s.task == task)
    planes = slice(seg.start, seg.stop)
    out: Dict[str, float] = {}
    if task in (TaskName.SMILE, TaskName.ATTRIBUTES):
        predicted, labels = [], []
        for sample, dets in zip(images, detections):
            predicted.extend(gt_predictions(dets, sample.boxes, planes, iou_min))
            for face in sample.faces:
                labels.append([face.smile] if task == TaskName.SMILE else list(face.attributes))
        per_attribute = per_attribute_accuracy(predicted, labels)
        if task == TaskName.SMILE:
            out["smile_accuracy"] = per_attribute[0] if per_attribute else 0.0
        else:
            for i, value in enumerate(per_attribute):
                out[f"attr{i}_accuracy"] = value
            out["attributes_accuracy"] = sum(per_attribute) / len(per_attribute) if per_attribute else 0.0
        return out

    pred, gt = [], []
    for sample, dets in zip(images, detections):
        for outcome in match_detections_to_gt(dets, sample.boxes, iou_min):
            if outcome.is_true_positive:
                pred.append(dets[outcome.detection_index].task_scores[planes])
                face = sample.faces[outcome.gt_index]
                gt.append([face.valence, face.arousal])
    out["va_matched"] = float(len(pred))
    if len(pred) < 2:
        logger.warning(f"VA SKIPPED | matched={len(pred)} | need at least 2 detected faces")
        return out
    out.update(va_report(pred, gt).flat())
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    weights = require_file(cfg.paths.weights, "weights file")
    data_dir = require_dataset(cfg.paths.data_dir)
    model, manifest = load_model(weights)
    tasks = [TaskName(args.task)] if args.task else list(model.head.tasks)
    missing = [t.value for t in tasks if t not in model.head.tasks]
    if missing:
        raise ConfigError(f"weights have no {', '.join(missing)} head (tasks: {[t.value for t in model.head.tasks]})")

    images, data_manifest = load_dataset(data_dir)
    stats = stats_for(manifest.stats, select_split(images, data_manifest, "train"))
    inference = cfg.inference
    metrics: Dict[str, float] = {}

    if args.tune:
        val = select_split(images, data_manifest, "val")
        if not val:
            raise ConfigError("--tune needs a non-empty val split")
        low = inference.model_copy(update={"th_face": 0.05})
        val_dets = _detect_all(model, val, stats, low)
        th_face, scores = tune_face_threshold(list(zip(val_dets, [s.boxes for s in val])), iou_min=inference.eval_iou)
        metrics["tuned_th_face"] = th_face
        metrics["tuned_val_f1"] = scores["f1"]
        if TaskName.SMILE in model.head.tasks:
            seg = next(s for s in model.head.segments() if s.task == TaskName.SMILE)
            smile_scores, smile_labels = [], []
            for sample, dets in zip(val, val_dets):
                for outcome in match_detections_to_gt(dets, sample.boxes, inference.eval_iou):
                    if outcome.is_true_positive:
                        smile_scores.append(dets[outcome.detection_index].task_scores[seg.start])
                        smile_labels.append(sample.faces[outcome.gt_index].smile)
            th_t, _ = tune_task_threshold(smile_scores, smile_labels, inference.th_t)
            metrics["tuned_th_t"] = th_t
            inference = inference.model_copy(update={"th_t": th_t})
        inference = inference.model_copy(update={"th_face": th_face})

    split = select_split(images, data_manifest, args.split)
    detections = _detect_all(model, split, stats, inference)
    per_image = list(zip(detections, [s.boxes for s in split]))
    metrics.update(detection_report(per_image, inference.eval_iou))
    for task in tasks:
        metrics.update(task_metrics(model.head, task, split, detections, inference.eval_iou))

    _, _, pos, neg = detection_scores(per_image, inference.eval_iou)
    roc = roc_points(pos, neg) if pos and neg else None
    out = Path(args.out or cfg.paths.out_dir) / f"eval_{args.split}"
    write_report(metrics, out, roc)
    for key in sorted(metrics):
        print(f"{key}: {metrics[key]!r}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    weights = require_file(cfg.paths.weights, "weights file")
    image_path = require_file(Path(args.image) if args.image else None, "image")
    model, manifest = load_model(weights)
    if manifest.stats is None:
        raise ConfigError(f"{weights}: weights carry no dataset statistics")

    volumes = run_model(model, normalize(read_ppm(image_path), manifest.stats))
    detections = finalize(candidates(volumes, DefaultBoxGrid(), cfg.inference.th_face), model.head, cfg.inference)
    if args.dump_heatmaps:
        dump_heatmaps(volumes, args.dump_heatmaps, model.head)

    text = format_detections(image_path.stem, detections)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    logger.info(f"PREDICT | image={image_path} | faces={len(detections)}")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    import pytest

    tests = Path(__file__).resolve().parent.parent / "tests"
    if not tests.is_dir():
        raise ConfigError(f"test suite not found at {tests}")
    return int(pytest.main([str(tests), "-q", "-m", "slow" if args.slow else "not slow"]))


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    cfg = apply_overrides(load_run_config(args.config), args)
    weights = require_file(cfg.paths.weights, "weights file")
    uvicorn.run(
        create_app(weights, cfg.inference),
        host=args.host,
        port=args.port,
        log_level="info",
        access_log=False
    )
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------

class CommandLineParser(argparse.ArgumentParser):
    """Reports bad arguments through the same one-line error path as every other failure."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(prog="facessd", description="Single-shot multi-task face analysis")
    parser.add_argument("--log-level", default=None, help="error, info or debug (default $FSSD_LOG_LEVEL or info)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--seed", type=int, default=None, help="Seed for every random choice")
        if "out" in flags:
            p.add_argument("--out", help="Output directory or file")
        if "weights" in flags:
            p.add_argument("--weights", help="Weights file")
        if "data" in flags:
            p.add_argument("--data", help="Dataset directory")
        if "task" in flags:
            p.add_argument("--task", choices=[t.value for t in TaskName], help="Analysis task")
        return p

    gen = common(sub.add_parser("gen", help="Generate the synthetic dataset"), "out")
    gen.add_argument("--spec", help="SyntheticSpec JSON file (default: the config's data section)")
    gen.set_defaults(handler=cmd_gen)

    train = common(sub.add_parser("train", help="Train one phase or the four-step pipeline"), "out", "weights", "data", "task")
    mode = train.add_mutually_exclusive_group()
    mode.add_argument("--phase", choices=[p.value for p in Phase], help="Train a single phase")
    mode.add_argument("--pipeline", action="store_true", help="Run steps 1-4")
    train.add_argument("--threads", type=int, default=None, help="Augmentation worker threads")
    train.set_defaults(handler=cmd_train)

    ev = common(sub.add_parser("eval", help="Evaluate a weights file on a dataset split"), "out", "weights", "data", "task")
    ev.add_argument("--split", default="test", help="train, val, test or all")
    ev.add_argument("--tune", action="store_true", help="Tune th_face / th_t on the val split first")
    ev.set_defaults(handler=cmd_eval)

    predict = common(sub.add_parser("predict", help="Detect faces in one PPM image"), "out", "weights")
    predict.add_argument("--image", required=True, help="Binary PPM image, 300x300")
    predict.add_argument("--dump-heatmaps", metavar="PREFIX", help="Write every heatmap plane as PGM")
    predict.set_defaults(handler=cmd_predict)

    selftest = sub.add_parser("selftest", help="Run the gradient and oracle suites")
    selftest.add_argument("--slow", action="store_true", help="Run the training experiments instead")
    selftest.set_defaults(handler=cmd_selftest)

    serve = common(sub.add_parser("serve", help="Serve detection over HTTP"), "weights")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(handler=cmd_serve)
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
        return args.handler(args)
    except FaceSSDError as e:
        print(f"error: {e.kind}: {_one_line(e)}", file=sys.stderr)
    except ValidationError as e:
        errors = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        print(f"error: config: {_one_line(errors)}", file=sys.stderr)
    except json.JSONDecodeError as e:
        print(f"error: config: {_one_line(e)}", file=sys.stderr)
    except OSError as e:
        print(f"error: io: {_one_line(e)}", file=sys.stderr)
    return EXIT_ERROR
