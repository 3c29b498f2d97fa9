import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from core.config import RunConfig, dump_config, load_config
from core.errors import AcceptanceError, ConfigurationError
from data.annotations import (
    AnnotatedImage,
    load_dataset,
    read_depth,
    read_rgb,
    save_dataset,
    write_rgb,
)
from data.synth import synth_dataset, synth_orchard
from detection.anchors import generate_anchors, kmeans_anchors
from detection.dump import DetectionDump, read_dump, read_dumps, write_dump
from detection.overlay import render_overlay
from detection.predictor import Predictor
from metrics.evaluation import ImagePrediction, evaluate
from metrics.report import format_table, write_report
from model.network import DaSNet, build_dasnet, load_model
from pointcloud.geometry import colorize, deproject
from pointcloud.ply import write_ply
from training.gradcheck_suite import model_check, operator_checks
from training.trainer import fit, ground_truth, validate

logger = logging.getLogger(__name__)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(
            update={
                "model": cfg.model.model_copy(update={"seed": args.seed}),
                "train": cfg.train.model_copy(update={"seed": args.seed}),
            }
        )
    return cfg


def _model(cfg: RunConfig, weights: str | None) -> DaSNet:
    if weights is None:
        return build_dasnet(cfg.model)
    return load_model(cfg.model, weights)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val) if args.val else []
    model = _model(cfg, args.weights)
    report = fit(train_set, val_set, model, cfg, out_dir)
    logger.info(
        f"Training finished: {report.parameter_count} parameters, weights "
        f"{report.weight_bytes} bytes, best epoch {report.best_epoch} (F1 {report.best_f1})"
    )
    return 0


def _predictions_from_dumps(
    images: list[AnnotatedImage], directory: str
) -> list[ImagePrediction]:
    dumps = read_dumps(directory)
    predictions = []
    for im in images:
        if im.name not in dumps:
            raise ConfigurationError(f"no detection dump for image {im.name} in {directory}")
        predictions.append(dumps[im.name].to_image_prediction())
    return predictions


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    images = load_dataset(args.data)
    if args.detections:
        predictions = _predictions_from_dumps(images, args.detections)
        report = evaluate([ground_truth(im) for im in images], predictions, cfg.eval.match_iou)
    else:
        model = load_model(cfg.model, args.weights)
        anchors = generate_anchors(cfg.model.anchors)
        report = validate(model, anchors, cfg.eval, images, cfg.train.batch_size)
    write_report(report, args.out)
    logger.info("\n" + format_table(report))
    if args.min_f1 is not None and report.f1 < args.min_f1:
        raise AcceptanceError(f"F1 {report.f1:.4f} below required {args.min_f1}")
    return 0


def _infer_inputs(args: argparse.Namespace) -> list[tuple[str, np.ndarray]]:
    if args.data:
        return [(im.name, im.rgb) for im in load_dataset(args.data)]
    inputs = []
    for path in args.image:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"image not found: {p}")
        inputs.append((p.stem, read_rgb(p)))
    return inputs


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    predictor = Predictor(
        load_model(cfg.model, args.weights), generate_anchors(cfg.model.anchors), cfg.eval
    )
    out_dir = Path(args.out)
    for name, rgb in _infer_inputs(args):
        pred = predictor.predict(rgb)
        dump = DetectionDump.from_prediction(
            name, rgb.shape[:2], pred.detections, pred.branch_map
        )
        write_dump(dump, out_dir / "detections")
        overlay = render_overlay(
            rgb, [d.box for d in pred.detections], pred.rendered_masks, pred.branch_map
        )
        write_rgb(out_dir / "overlays" / f"{name}.png", overlay)
        logger.info(f"{name}: {len(pred.detections)} detections")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    images = synth_dataset(args.seed, args.count, cfg.synth)
    save_dataset(images, args.out)
    if args.anchors:
        sizes = np.array(
            [(inst.box[2], inst.box[3]) for im in images for inst in im.instances],
            dtype=np.float64,
        )
        pairs = kmeans_anchors(sizes, k=6, seed=args.seed)
        rounded = [[round(w, 1), round(h, 1)] for w, h in pairs]
        (Path(args.out) / "anchors.json").write_text(json.dumps(rounded), encoding="utf-8")
        logger.info(f"k-means anchors: {rounded}")
    return 0


def cmd_pointcloud(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    rgb = read_rgb(Path(args.image))
    depth = read_depth(Path(args.depth))
    if depth.shape != rgb.shape[:2]:
        raise ConfigurationError(f"depth {depth.shape} and image {rgb.shape[:2]} differ")
    if args.detections:
        dump = read_dump(args.detections)
        masks, branch_map = dump.instance_masks(), dump.branch_map()
    else:
        predictor = Predictor(
            load_model(cfg.model, args.weights), generate_anchors(cfg.model.anchors), cfg.eval
        )
        pred = predictor.predict(rgb)
        masks, branch_map = pred.rendered_masks, pred.branch_map
    cam = cfg.camera
    points = deproject(depth, cam.intrinsics, cam.stride, cam.min_depth, cam.max_depth)
    cloud = colorize(
        points,
        masks,
        branch_map,
        rgb=rgb,
        branch_original_color=args.branch_original_color or cam.branch_original_color,
    )
    write_ply(cloud, args.out)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    seed = cfg.train.seed
    reports = operator_checks(seed)
    if not args.skip_model:
        reports["model"] = model_check(cfg, args.size, args.entries, seed)
    failed = []
    for name, report in reports.items():
        status = "ok" if report.passed(args.tolerance) else "FAIL"
        logger.info(f"{name:<24} max relative error {report.max_relative_error:.3e} {status}")
        if status == "FAIL":
            failed.append(name)
    worst = max(r.max_relative_error for r in reports.values())
    logger.info(f"gradcheck max relative error {worst:.3e}")
    if failed:
        raise AcceptanceError(f"gradcheck failed for {', '.join(failed)}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    synth_cfg = cfg.synth.model_copy(update={"image_size": cfg.model.input_size})
    predictor = Predictor(
        _model(cfg, args.weights), generate_anchors(cfg.model.anchors), cfg.eval
    )
    timings = []
    for k in range(args.count):
        image = synth_orchard(cfg.train.seed + k, synth_cfg)
        start = time.perf_counter()
        predictor.predict(image.rgb)
        timings.append(time.perf_counter() - start)
    h, w = cfg.model.input_size
    logger.info(
        f"Inference at {h}x{w}: mean {1000 * np.mean(timings):.1f} ms, "
        f"min {1000 * np.min(timings):.1f} ms over {args.count} images"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasnet", description="DaSNet-V2 desk-scale toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="override model and training seeds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train on an annotated manifest")
    p.add_argument("--data", required=True, help="training manifest (JSON lines)")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--weights", help="initial weights")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score predictions against a manifest")
    p.add_argument("--data", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--weights")
    source.add_argument("--detections", help="directory of detection dumps")
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--min-f1", type=float, help="fail with exit code 3 below this F1")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="write detection dumps and overlays")
    inputs = p.add_mutually_exclusive_group(required=True)
    inputs.add_argument("--data", help="manifest whose images are processed")
    inputs.add_argument("--image", action="append", help="RGB image (repeatable)")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", default="runs/infer")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("synth", parents=[common], help="materialize a synthetic dataset")
    p.set_defaults(seed=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--anchors", action="store_true", help="also derive 6 k-means anchors")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pointcloud", parents=[common], help="colored PLY from an RGB-D frame")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True, help="16-bit depth PNG")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--detections", help="detection dump JSON for this frame")
    source.add_argument("--weights")
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--branch-original-color", action="store_true")
    p.set_defaults(handler=cmd_pointcloud)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--entries", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("benchmark", parents=[common], help="time inference on synthetic images")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--weights")
    p.set_defaults(handler=cmd_benchmark)
    return parser
