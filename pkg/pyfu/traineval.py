"""Loss weighting, learning-rate schedule, training loop and overlap evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from .camproj import build_mapping, camera_coordinates
from .const import (
    DEFAULT_BASE_LR,
    DEFAULT_MOMENTUM,
    DEFAULT_POLY_POWER,
    DEFAULT_WEIGHT_DECAY,
    IGNORE_LABEL,
    LOGGER,
)
from .data import RangeViewSample
from .errors import PyFuNumericalError, PyFuValueError
from .network import image_tensor, pyfu_forward, range_tensor
from .numcore import SGD, Adam, backward, no_grad, scale, weighted_ce_softmax
from .postprocess import knn_postprocess
from .rangeview import AugmentConfig, augment, crop_to_overlap, project_cloud

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from .data import FrameBundle, SensorConfig
    from .network import PyFuConfig, PyFuNetwork
    from .numcore import Tensor
    from .postprocess import KnnConfig

OPTIMIZER_SGD = "sgd"
OPTIMIZER_ADAM = "adam"
TARGET_NETWORK = "network"
TARGET_CAMERA = "camera"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and augmentation switches."""

    base_lr: float = DEFAULT_BASE_LR
    steps: int = 2000
    power: float = DEFAULT_POLY_POWER
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    momentum: float = DEFAULT_MOMENTUM
    optimizer: str = OPTIMIZER_SGD
    grad_clip: float | None = None
    batch_size: int = 1
    flip_probability: float = 0.5
    crop_size: tuple[int, int] | None = None
    eval_every: int = 100
    target: str = TARGET_NETWORK
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the schedule."""
        if self.base_lr <= 0:
            msg = f"base_lr must be positive, got {self.base_lr}"
            raise PyFuValueError(msg)
        if self.steps < 1 or self.batch_size < 1:
            msg = f"steps and batch_size must be at least 1, got {self.steps} and {self.batch_size}"
            raise PyFuValueError(msg)
        if self.optimizer not in (OPTIMIZER_SGD, OPTIMIZER_ADAM):
            msg = f"Unknown optimizer {self.optimizer!r}"
            raise PyFuValueError(msg)
        if self.target not in (TARGET_NETWORK, TARGET_CAMERA):
            msg = f"Unknown training target {self.target!r}"
            raise PyFuValueError(msg)

    @property
    def augment(self) -> AugmentConfig:
        """Return the augmentation switches."""
        return AugmentConfig(flip_probability=self.flip_probability, crop_size=self.crop_size)


def stage_config(model: PyFuConfig, target: str) -> PyFuConfig:
    """Unfreeze the part a training stage optimizes: the camera, the lidar baseline, or the fusion layers."""
    if target == TARGET_CAMERA:
        return replace(model, freeze_camera=False)
    if not model.uses_camera:
        return replace(model, freeze_lidar=False)
    return model


def class_weights(histogram: Sequence[int] | np.ndarray) -> np.ndarray:
    """Return inverse-frequency weights log(n / n_c); absent classes get the rarest class's weight."""
    counts = np.asarray(histogram, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        msg = "Label histogram is empty; class weights are undefined"
        raise PyFuValueError(msg)
    present = counts > 0
    weights = np.zeros_like(counts)
    weights[present] = np.log(total / counts[present])
    if not present.all():
        LOGGER.warning("Classes %s are absent from the histogram", np.flatnonzero(~present).tolist())
        weights[~present] = weights[present].max()
    if not np.all(weights > 0):
        LOGGER.warning("Only one class is present; falling back to uniform class weights")
        return np.ones_like(counts)
    return weights


def class_histogram(
    bundles: Sequence[FrameBundle],
    num_classes: int,
    *,
    overlap_only: bool = True,
) -> np.ndarray:
    """Count point labels, optionally only for points visible to the camera."""
    histogram = np.zeros(num_classes, dtype=np.int64)
    for bundle in bundles:
        labels = bundle.labels
        if labels is None:
            continue
        keep = labels != IGNORE_LABEL
        if overlap_only:
            _, visible = camera_coordinates(bundle.cloud.points, bundle.camera)
            keep &= visible
        histogram += np.bincount(labels[keep], minlength=num_classes)[:num_classes]
    return histogram


def image_label_histogram(bundles: Sequence[FrameBundle], num_classes: int) -> np.ndarray:
    """Count camera pixel labels of the frames that carry them."""
    histogram = np.zeros(num_classes, dtype=np.int64)
    for bundle in bundles:
        if bundle.image_labels is None:
            continue
        labels = bundle.image_labels.astype(np.int64).ravel()
        labels = labels[labels < num_classes]
        histogram += np.bincount(labels, minlength=num_classes)
    return histogram


def poly_lr(iteration: int, max_iterations: int, base: float, power: float = DEFAULT_POLY_POWER) -> float:
    """Return base * (1 - (i / i_max) ** power)."""
    if not 0 <= iteration <= max_iterations:
        msg = f"Iteration {iteration} outside [0, {max_iterations}]"
        raise PyFuValueError(msg)
    return base * (1.0 - (iteration / max_iterations) ** power)


@dataclass
class IoUResult:
    """Per-class IoU (NaN for absent classes) and their mean."""

    iou: np.ndarray
    miou: float
    accuracy: float

    def as_record(self) -> dict[str, Any]:
        """Return a JSON-friendly dict with absent classes as null."""
        return {
            "miou": self.miou,
            "accuracy": self.accuracy,
            "iou": [None if math.isnan(value) else float(value) for value in self.iou],
        }


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int) -> None:
        """Start from zero counts."""
        if num_classes < 1:
            msg = f"Class count must be positive, got {num_classes}"
            raise PyFuValueError(msg)
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> ConfusionMatrix:
        """Wrap an existing count matrix."""
        matrix = cls(len(counts))
        matrix.counts = np.asarray(counts, dtype=np.int64).copy()
        return matrix

    @property
    def total(self) -> int:
        """Return the number of evaluated elements."""
        return int(self.counts.sum())

    def update(
        self,
        predictions: np.ndarray,
        targets: np.ndarray,
        mask: np.ndarray | None = None,
    ) -> ConfusionMatrix:
        """Add elements inside `mask` whose target is not the ignore label."""
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if predictions.shape != targets.shape:
            msg = f"Predictions {predictions.shape} and targets {targets.shape} differ in size"
            raise PyFuValueError(msg)
        keep = targets != IGNORE_LABEL
        if mask is not None:
            keep &= np.asarray(mask, dtype=bool).reshape(-1)
        predictions = predictions[keep]
        targets = targets[keep]
        for name, values in (("prediction", predictions), ("target", targets)):
            if values.size and (values.min() < 0 or values.max() >= self.num_classes):
                msg = f"A {name} label lies outside [0, {self.num_classes})"
                raise PyFuValueError(msg)
        flat = np.bincount(targets * self.num_classes + predictions, minlength=self.num_classes**2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        """Add another matrix's counts."""
        if other.num_classes != self.num_classes:
            msg = f"Cannot merge {other.num_classes}-class counts into {self.num_classes} classes"
            raise PyFuValueError(msg)
        self.counts += other.counts
        return self

    def accuracy(self) -> float:
        """Return the fraction of correctly predicted elements."""
        if self.total == 0:
            msg = "Confusion matrix is empty"
            raise PyFuValueError(msg)
        return float(np.trace(self.counts)) / self.total


def confusion_update(
    matrix: ConfusionMatrix,
    predictions: np.ndarray,
    targets: np.ndarray,
    overlap_mask: np.ndarray | None = None,
) -> ConfusionMatrix:
    """Count overlap elements into `matrix`."""
    return matrix.update(predictions, targets, overlap_mask)


def iou_miou(matrix: ConfusionMatrix, *, include_absent: bool = False) -> IoUResult:
    """Return per-class IoU and the mean over present (or all) classes."""
    if matrix.total == 0:
        msg = "Confusion matrix is empty"
        raise PyFuValueError(msg)
    counts = matrix.counts.astype(np.float64)
    true_positive = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - true_positive
    present = union > 0
    iou = np.full(matrix.num_classes, np.nan)
    iou[present] = true_positive[present] / union[present]
    miou = float(np.nan_to_num(iou).mean()) if include_absent else float(iou[present].mean())
    return IoUResult(iou=iou, miou=miou, accuracy=matrix.accuracy())


def build_sample(bundle: FrameBundle, sensor: SensorConfig) -> RangeViewSample:
    """Project a frame and build its camera mapping."""
    range_image, index = project_cloud(bundle.cloud, sensor)
    return RangeViewSample(
        range_image=range_image,
        mapping=build_mapping(bundle.cloud, index, bundle.camera),
        image=bundle.image,
        image_labels=bundle.image_labels,
        frame_id=bundle.frame_id,
        cloud=bundle.cloud,
        index=index,
    )


def sample_logits(
    network: PyFuNetwork,
    sample: RangeViewSample,
    target: str,
    *,
    full_view: bool = False,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Run the network on a sample; return logits, aligned targets and the evaluation mask."""
    if target == TARGET_CAMERA:
        if sample.image_labels is None:
            msg = f"Frame {sample.frame_id} has no image labels for camera training"
            raise PyFuValueError(msg)
        logits = network.camera_logits(image_tensor(sample.image))
        return logits, sample.image_labels, np.ones(sample.image_labels.shape, dtype=bool)

    mapping = sample.mapping
    labels = sample.range_image.labels
    if full_view and not network.config.uses_camera:
        output = network(range_tensor(sample.range_image, network.config))
        return output.logits, labels, sample.range_image.mask
    output = network(range_tensor(sample.range_image, network.config), image_tensor(sample.image), mapping)
    cropped = crop_to_overlap(labels, mapping.columns, mapping.rows)
    return output.logits, cropped, crop_to_overlap(mapping.valid, mapping.columns, mapping.rows)


@dataclass
class TrainResult:
    """Loss curve and the last evaluation."""

    losses: list[float] = field(default_factory=list)
    evaluations: list[dict[str, Any]] = field(default_factory=list)

    @property
    def final(self) -> dict[str, Any] | None:
        """Return the last evaluation record."""
        return self.evaluations[-1] if self.evaluations else None


def evaluate_pixels(
    network: PyFuNetwork,
    samples: Sequence[RangeViewSample],
    *,
    target: str = TARGET_NETWORK,
    include_absent: bool = False,
) -> IoUResult:
    """Pixel-level IoU inside the overlap (or over image pixels for the camera target)."""
    was_training = network.training
    network.train(mode=False)
    matrix = ConfusionMatrix(network.config.num_classes)
    with no_grad():
        for sample in samples:
            logits, targets, mask = sample_logits(network, sample, target)
            matrix.update(logits.data[0].argmax(axis=0), targets, mask)
    network.train(mode=was_training)
    return iou_miou(matrix, include_absent=include_absent)


@dataclass
class PointEvaluation:
    """Point-level evaluation and the refined labels of every frame."""

    result: IoUResult | None
    predictions: dict[str, np.ndarray]
    pixel_labels: dict[str, np.ndarray]


def evaluate_points(  # noqa: PLR0913
    network: PyFuNetwork,
    bundles: Sequence[FrameBundle],
    sensor: SensorConfig,
    knn: KnnConfig,
    *,
    use_camera: bool = True,
    workers: int = 1,
    include_absent: bool = False,
) -> PointEvaluation:
    """Point-level IoU inside the overlap after kNN refinement."""
    was_training = network.training
    network.train(mode=False)
    matrix = ConfusionMatrix(network.config.num_classes)
    predictions = {}
    pixel_labels = {}
    for bundle in bundles:
        scores = pyfu_forward(network, bundle, sensor, use_camera=use_camera)
        refined = knn_postprocess(
            bundle.cloud,
            scores.index,
            scores.range_image,
            scores.pixel_labels,
            knn,
            workers=workers,
        )
        refined = np.where(scores.mask, refined, IGNORE_LABEL)
        predictions[bundle.frame_id] = refined
        pixel_labels[bundle.frame_id] = scores.pixel_labels
        if bundle.labels is not None:
            matrix.update(refined, bundle.labels, scores.mask)
    network.train(mode=was_training)
    result = iou_miou(matrix, include_absent=include_absent) if matrix.total else None
    return PointEvaluation(result=result, predictions=predictions, pixel_labels=pixel_labels)


def _make_optimizer(network: PyFuNetwork, config: TrainConfig) -> SGD:
    trainable = [param for param in network.params() if not param.frozen]
    LOGGER.info(
        "Optimizing %s of %s parameter tensors with %s",
        len(trainable),
        len(network.params()),
        config.optimizer,
    )
    if config.optimizer == OPTIMIZER_ADAM:
        return Adam(trainable, weight_decay=config.weight_decay, grad_clip=config.grad_clip)
    return SGD(
        trainable,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
    )


def _augmented(sample: RangeViewSample, config: TrainConfig, rng: np.random.Generator) -> RangeViewSample:
    candidate = augment(sample, config.augment, rng)
    if config.target == TARGET_NETWORK and not candidate.mapping.has_overlap:
        LOGGER.debug("Crop of frame %s lost the camera overlap; using the full frame", sample.frame_id)
        return augment(sample, AugmentConfig(flip_probability=config.flip_probability), rng)
    return candidate


def train_loop(  # noqa: PLR0913
    samples: Sequence[RangeViewSample],
    network: PyFuNetwork,
    config: TrainConfig,
    weights: np.ndarray,
    *,
    eval_samples: Sequence[RangeViewSample] | None = None,
    log_path: Path | None = None,
) -> TrainResult:
    """Optimize `network` on `samples`; every random draw comes from `config.seed`."""
    if not samples:
        msg = "Training set is empty"
        raise PyFuValueError(msg)
    rng = np.random.default_rng(config.seed)
    optimizer = _make_optimizer(network, config)
    result = TrainResult()
    network.train()
    started = time.monotonic()
    log = log_path.open("w", encoding="utf-8") if log_path is not None else None
    LOGGER.info("Training %s steps on %s frames (target %s)", config.steps, len(samples), config.target)
    try:
        for step in range(config.steps):
            lr = poly_lr(step, config.steps, config.base_lr, config.power)
            optimizer.zero_grad()
            step_loss = 0.0
            for _ in range(config.batch_size):
                sample = _augmented(samples[int(rng.integers(len(samples)))], config, rng)
                logits, targets, _ = sample_logits(
                    network, sample, config.target, full_view=not network.config.uses_camera
                )
                loss = weighted_ce_softmax(logits, targets, weights)
                value = loss.item()
                if not math.isfinite(value):
                    msg = f"Non-finite loss {value} at step {step + 1} on frame {sample.frame_id}"
                    raise PyFuNumericalError(msg)
                backward(scale(loss, 1.0 / config.batch_size))
                step_loss += value / config.batch_size
            optimizer.step(lr)
            result.losses.append(step_loss)

            record: dict[str, Any] = {"step": step + 1, "lr": lr, "loss": step_loss}
            last = step + 1 == config.steps
            if eval_samples and (last or (config.eval_every and (step + 1) % config.eval_every == 0)):
                evaluation = evaluate_pixels(network, eval_samples, target=config.target)
                record.update(evaluation.as_record())
                result.evaluations.append(record)
                LOGGER.info(
                    "Step %s: loss %.4f mIoU %.4f accuracy %.4f",
                    step + 1,
                    step_loss,
                    evaluation.miou,
                    evaluation.accuracy,
                )
            else:
                LOGGER.debug("Step %s: lr %.5f loss %.4f", step + 1, lr, step_loss)
            if log is not None:
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    LOGGER.info("Training finished after %s steps in %.1fs", config.steps, time.monotonic() - started)
    return result
