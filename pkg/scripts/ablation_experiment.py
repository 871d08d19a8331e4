#!/usr/bin/env python3
"""
Run the fusion ablation on the synthetic ambiguous-pair benchmark.

For every seed the lidar backbone and the camera backbone are pretrained
separately, then each fused preset is trained on top of the frozen
backbones. All presets are scored at point level on the overlap of a
held-out synthetic split; the summary reports mean mIoU per preset and the
IoU of the two crate classes that only the camera can tell apart.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from pyfu.checkpoint import load_state, network_state
from pyfu.config import RunConfig, load_run_config
from pyfu.const import (
    PRESET_BASELINE,
    PRESET_LATE_FUSION,
    PRESET_PFB,
    PRESET_PFB_PFH,
    PRESETS,
    SYNTHETIC_AMBIGUOUS_PAIR,
)
from pyfu.data import FrameBundle
from pyfu.dataio import gen_synthetic
from pyfu.network import PyFuNetwork
from pyfu.traineval import (
    TARGET_CAMERA,
    TARGET_NETWORK,
    build_sample,
    class_histogram,
    class_weights,
    evaluate_points,
    image_label_histogram,
    stage_config,
    train_loop,
)

LOGGER = logging.getLogger(__name__)
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "config" / "desk.toml"
VALIDATION_SEED_OFFSET = 10_000
FUSED_PRESETS = (PRESET_LATE_FUSION, PRESET_PFB, PRESET_PFB_PFH)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG, help="TOML run configuration")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="Seeds to average over")
    parser.add_argument("--presets", nargs="+", choices=PRESETS, default=list(PRESETS), help="Presets to compare")
    parser.add_argument("--train-frames", type=int, default=32, help="Synthetic training frames per seed")
    parser.add_argument("--val-frames", type=int, default=16, help="Synthetic validation frames per seed")
    parser.add_argument("--steps", type=int, help="Optimizer steps per stage (default: [train] steps)")
    parser.add_argument("--output", type=Path, help="Write the JSON report here as well")
    return parser


def _train_backbones(
    config: RunConfig,
    bundles: list[FrameBundle],
    seed: int,
) -> tuple[PyFuNetwork, PyFuNetwork]:
    """Pretrain the lidar-only network and the camera segmenter."""
    num_classes = config.model.num_classes
    samples = [build_sample(bundle, config.sensor) for bundle in bundles]
    baseline = config.model.with_preset(PRESET_BASELINE)

    lidar = PyFuNetwork(stage_config(baseline, TARGET_NETWORK), seed)
    weights = class_weights(class_histogram(bundles, num_classes, overlap_only=False))
    train_loop(samples, lidar, replace(config.train, target=TARGET_NETWORK), weights)

    camera = PyFuNetwork(stage_config(baseline, TARGET_CAMERA), seed)
    weights = class_weights(image_label_histogram(bundles, num_classes))
    train_loop(samples, camera, replace(config.train, target=TARGET_CAMERA), weights)
    return lidar, camera


def _train_fused(
    config: RunConfig,
    bundles: list[FrameBundle],
    preset: str,
    backbones: tuple[PyFuNetwork, PyFuNetwork],
    seed: int,
) -> PyFuNetwork:
    """Train one fused preset on top of frozen pretrained backbones."""
    model = replace(config.model.with_preset(preset), freeze_lidar=True, freeze_camera=True)
    network = PyFuNetwork(model, seed)
    lidar, camera = backbones
    load_state(network, network_state(lidar), prefix="lidar.")
    load_state(network, network_state(camera), prefix="camera.")
    network.train()
    weights = class_weights(class_histogram(bundles, model.num_classes))
    samples = [build_sample(bundle, config.sensor) for bundle in bundles]
    train_loop(samples, network, replace(config.train, target=TARGET_NETWORK), weights)
    return network


def _run_seed(
    config: RunConfig,
    seed: int,
    presets: list[str],
    frames: tuple[int, int],
) -> dict[str, dict[str, Any]]:
    config = config.with_overrides(seed=seed)
    train_bundles = gen_synthetic(replace(config.synth, frames=frames[0], seed=seed))
    val_bundles = gen_synthetic(replace(config.synth, frames=frames[1], seed=seed + VALIDATION_SEED_OFFSET))
    backbones = _train_backbones(config, train_bundles, seed)

    records = {}
    for preset in presets:
        LOGGER.info("Seed %s: preset %s", seed, preset)
        if preset == PRESET_BASELINE:
            network = backbones[0]
        else:
            network = _train_fused(config, train_bundles, preset, backbones, seed)
        evaluation = evaluate_points(network, val_bundles, config.sensor, config.knn, workers=config.threads)
        if evaluation.result is None:
            msg = f"Validation split of seed {seed} has no labelled overlap points"
            raise SystemExit(msg)
        records[preset] = evaluation.result.as_record()
    return records


def _ambiguous_iou(record: dict[str, Any]) -> float:
    values = [record["iou"][label] for label in SYNTHETIC_AMBIGUOUS_PAIR]
    return float(np.mean([0.0 if value is None else value for value in values]))


def _build_summary(runs: dict[int, dict[str, dict[str, Any]]], presets: list[str]) -> str:
    """Build a text table of mean mIoU and ambiguous-pair IoU per preset."""
    lines = [
        f"Fusion ablation over seeds {sorted(runs)}:",
        f"  {'preset':<10} {'mIoU':>7} {'pair IoU':>9}",
    ]
    baseline_pair = None
    for preset in presets:
        miou = float(np.mean([run[preset]["miou"] for run in runs.values()]))
        pair = float(np.mean([_ambiguous_iou(run[preset]) for run in runs.values()]))
        if preset == PRESET_BASELINE:
            baseline_pair = pair
        lines.append(f"  {preset:<10} {100 * miou:7.1f} {100 * pair:9.1f}")
    if baseline_pair is not None and PRESET_PFB_PFH in presets:
        gain = np.mean([_ambiguous_iou(run[PRESET_PFB_PFH]) for run in runs.values()]) - baseline_pair
        lines.append(f"  pfb-pfh gain on the ambiguous pair: {100 * gain:+.1f} IoU points")
    return "\n".join(lines)


def main() -> None:
    """Train and score every preset for every seed."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = _build_parser().parse_args()
    config = load_run_config(args.config).with_overrides(steps=args.steps)

    runs = {
        seed: _run_seed(config, seed, args.presets, (args.train_frames, args.val_frames)) for seed in args.seeds
    }
    LOGGER.info(_build_summary(runs, args.presets))

    report = json.dumps({str(seed): run for seed, run in runs.items()}, indent=2, sort_keys=True) + "\n"
    if args.output is not None:
        args.output.write_text(report, encoding="utf-8")
    sys.stdout.write(report)


if __name__ == "__main__":
    main()
