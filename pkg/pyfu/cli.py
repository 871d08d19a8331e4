"""Command line: synthesize data, train, evaluate, infer and run the oracle suites."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

import colorlog

from .checkpoint import config_from_records, load_state, read_checkpoint, save_checkpoint
from .config import LoggingConfig, RunConfig, load_run_config
from .const import (
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    EXIT_USAGE_ERROR,
    LOGGER,
    PRESETS,
    SYNTHETIC_CLASSES,
    VERSION,
)
from .dataio import (
    gen_synthetic,
    load_frames,
    load_label_map,
    render_labels,
    write_dataset,
    write_ppm,
    write_predictions,
)
from .errors import PyFuConfigError, PyFuDataError, PyFuError
from .network import PyFuNetwork
from .selftest import run_selftest
from .traineval import (
    TARGET_CAMERA,
    build_sample,
    class_histogram,
    class_weights,
    evaluate_points,
    image_label_histogram,
    stage_config,
    train_loop,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

    import numpy as np

    from .data import FrameBundle
    from .traineval import IoUResult

LOG_FORMAT = "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration (default: built-in defaults)")
    common.add_argument("--seed", type=int, help="Seed for every random draw (overrides the file)")
    common.add_argument("--preset", choices=PRESETS, help="Ablation preset (overrides the file)")
    common.add_argument("--threads", type=int, help="Worker cap for point-level refinement")
    common.add_argument("-v", "--verbose", action="store_true", help="Log at debug level")
    return common


def _build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="pyfu",
        description="Lidar-camera pyramid fusion for range-view semantic segmentation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth_parser = subparsers.add_parser("synth", parents=[common], help="Write a synthetic dataset")
    synth_parser.add_argument("--frames", type=int, help="Number of frames (overrides [synth] frames)")
    synth_parser.add_argument("--output", type=Path, help="Dataset root (default: [data] root)")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train and write a checkpoint")
    train_parser.add_argument("--steps", type=int, help="Optimizer steps (overrides [train] steps)")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Point-level IoU on the overlap")
    eval_parser.add_argument("checkpoint", type=Path, help="Checkpoint written by train")
    eval_parser.add_argument("--root", type=Path, help="Dataset root (default: [data] val_root, then root)")
    eval_parser.add_argument("--render", type=Path, help="Directory for PPM renderings of predicted labels")
    eval_parser.add_argument(
        "--include-absent",
        action="store_true",
        help="Average IoU over every class instead of the classes present",
    )

    infer_parser = subparsers.add_parser("infer", parents=[common], help="Write per-point label files")
    infer_parser.add_argument("checkpoint", type=Path, help="Checkpoint written by train")
    infer_parser.add_argument("--root", type=Path, help="Dataset root (default: [data] root)")
    infer_parser.add_argument("--output", type=Path, help="Prediction directory (default: <output>/predictions)")

    selftest_parser = subparsers.add_parser("selftest", parents=[common], help="Run the oracle suites")
    selftest_parser.add_argument(
        "--quick",
        action="store_true",
        help="Skip the end-to-end network check and shrink the kNN suite",
    )
    return parser


def _configure_logging(config: LoggingConfig, *, verbose: bool = False) -> None:
    handler = colorlog.StreamHandler()
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(logging.DEBUG if verbose else config.default.upper())
    for name, level in config.logs.items():
        logging.getLogger(name).setLevel(logging.DEBUG if verbose else level.upper())


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config).with_overrides(
        seed=args.seed,
        preset=args.preset,
        steps=getattr(args, "steps", None),
        threads=args.threads,
    )
    _configure_logging(config.logging, verbose=args.verbose)
    return config


def _label_map(config: RunConfig) -> np.ndarray | None:
    return None if config.data.label_map is None else load_label_map(config.data.label_map)


def _load_network(path: Path, seed: int) -> PyFuNetwork:
    records = read_checkpoint(path)
    network = PyFuNetwork(config_from_records(records), seed)
    load_state(network, records)
    network.train(mode=False)
    return network


def _class_names(num_classes: int) -> list[str]:
    if num_classes == len(SYNTHETIC_CLASSES):
        return list(SYNTHETIC_CLASSES)
    return [f"class {label}" for label in range(num_classes)]


def _build_summary(result: IoUResult, names: Sequence[str]) -> str:
    """Build the per-class IoU table."""
    width = max(len(name) for name in names)
    lines = [f"{'class':<{width}}  IoU"]
    for name, value in zip(names, result.iou, strict=True):
        shown = "  n/a" if math.isnan(value) else f"{100 * value:5.1f}"
        lines.append(f"{name:<{width}}  {shown}")
    lines.extend(
        [
            "",
            f"{'mIoU':<{width}}  {100 * result.miou:5.1f}",
            f"{'accuracy':<{width}}  {100 * result.accuracy:5.1f}",
        ]
    )
    return "\n".join(lines)


def _write_json(data: dict[str, Any], path: Path | None = None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _synth(args: argparse.Namespace, config: RunConfig) -> None:
    spec = config.synth
    if args.frames is not None:
        if args.frames < 1:
            msg = f"--frames must be positive, got {args.frames}"
            raise PyFuConfigError(msg)
        spec = replace(spec, frames=args.frames)
    root = args.output or config.data.root
    write_dataset(root, gen_synthetic(spec))
    _write_json({"frames": spec.frames, "root": str(root), "seed": spec.seed})


def _load_backbones(network: PyFuNetwork, config: RunConfig) -> None:
    for prefix, path in (("lidar.", config.data.lidar_checkpoint), ("camera.", config.data.camera_checkpoint)):
        if path is not None:
            loaded = load_state(network, read_checkpoint(path), prefix=prefix)
            LOGGER.info("Loaded %s pretrained %s entries from %s", len(loaded), prefix.rstrip("."), path)


def _training_weights(bundles: Sequence[FrameBundle], config: RunConfig, *, overlap_only: bool) -> np.ndarray:
    num_classes = config.model.num_classes
    if config.train.target == TARGET_CAMERA:
        histogram = image_label_histogram(bundles, num_classes)
    else:
        histogram = class_histogram(bundles, num_classes, overlap_only=overlap_only)
    LOGGER.debug("Label histogram: %s", histogram.tolist())
    return class_weights(histogram)


def _train(_args: argparse.Namespace, config: RunConfig) -> None:
    label_map = _label_map(config)
    bundles = load_frames(config.data.root, label_map, config.data.frames)
    validation = bundles
    if config.data.val_root is not None:
        validation = load_frames(config.data.val_root, label_map, config.data.val_frames)

    model = stage_config(config.model, config.train.target)
    weights = _training_weights(bundles, config, overlap_only=model.uses_camera)
    network = PyFuNetwork(model, config.seed)
    _load_backbones(network, config)

    samples = [build_sample(bundle, config.sensor) for bundle in bundles]
    eval_samples = [build_sample(bundle, config.sensor) for bundle in validation]
    output = config.data.output
    output.mkdir(parents=True, exist_ok=True)
    name = config.run_name
    result = train_loop(
        samples,
        network,
        config.train,
        weights,
        eval_samples=eval_samples,
        log_path=output / f"{name}.jsonl",
    )
    checkpoint = output / f"{name}.pyfu"
    save_checkpoint(checkpoint, network, model)
    _write_json(
        {
            "checkpoint": str(checkpoint),
            "final": result.final,
            "final_loss": result.losses[-1],
            "run": name,
            "steps": len(result.losses),
        }
    )


def _eval(args: argparse.Namespace, config: RunConfig) -> None:
    network = _load_network(args.checkpoint, config.seed)
    root = args.root or config.data.val_root or config.data.root
    bundles = load_frames(root, _label_map(config), config.data.val_frames)
    evaluation = evaluate_points(
        network,
        bundles,
        config.sensor,
        config.knn,
        workers=config.threads,
        include_absent=args.include_absent,
    )
    if evaluation.result is None:
        msg = f"No labelled overlap points under {root}"
        raise PyFuDataError(msg)
    summary = _build_summary(evaluation.result, _class_names(network.config.num_classes))
    LOGGER.info("Point-level evaluation on %s frames:\n%s", len(bundles), summary)
    if args.render is not None:
        for frame_id, labels in evaluation.pixel_labels.items():
            write_ppm(render_labels(labels), args.render / f"{frame_id}.ppm")
        LOGGER.info("Rendered %s range-view label images to %s", len(evaluation.pixel_labels), args.render)
    record = {"checkpoint": str(args.checkpoint), "frames": len(bundles), **evaluation.result.as_record()}
    _write_json(record, config.data.output / f"{args.checkpoint.stem}-eval.json")


def _infer(args: argparse.Namespace, config: RunConfig) -> None:
    network = _load_network(args.checkpoint, config.seed)
    root = args.root or config.data.root
    bundles = load_frames(root, _label_map(config), config.data.frames)
    evaluation = evaluate_points(
        network,
        bundles,
        config.sensor,
        config.knn,
        use_camera=network.config.uses_camera,
        workers=config.threads,
    )
    output = args.output or config.data.output / "predictions"
    for frame_id, labels in evaluation.predictions.items():
        write_predictions(labels, output / f"{frame_id}.label")
    LOGGER.info("Wrote predictions for %s frames to %s", len(evaluation.predictions), output)


def _selftest(args: argparse.Namespace, config: RunConfig) -> bool:
    results = run_selftest(config.seed, quick=args.quick)
    _write_json(
        {
            "checks": [
                {"detail": result.detail, "name": result.name, "passed": result.passed, "suite": result.suite}
                for result in results
            ],
            "passed": all(result.passed for result in results),
        }
    )
    return all(result.passed for result in results)


COMMANDS = {
    "synth": _synth,
    "train": _train,
    "eval": _eval,
    "infer": _infer,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return its exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exception:
        return EXIT_OK if exception.code in (None, 0) else EXIT_USAGE_ERROR
    _configure_logging(LoggingConfig(), verbose=args.verbose)

    try:
        config = _run_config(args)
        if args.command == "selftest":
            return EXIT_OK if _selftest(args, config) else EXIT_RUNTIME_ERROR
        COMMANDS[args.command](args, config)
    except PyFuConfigError as exception:
        LOGGER.error("Configuration error: %s", exception)  # noqa: TRY400
        return EXIT_USAGE_ERROR
    except (PyFuError, OSError):
        LOGGER.exception("Command %s failed", args.command)
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


def main() -> None:
    """Run command line entrypoint."""
    sys.exit(run_cli())
