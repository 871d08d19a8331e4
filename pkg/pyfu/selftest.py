"""Oracle suites behind the `selftest` command: gradients, projections, kNN and metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .blocks import (
    DPC,
    LSFE,
    BasicResidual,
    BottleneckResidual,
    Conv2d,
    InvertedResidual,
    MismatchCorrection,
    TwoWayFPN,
    TwoWayPyramid,
)
from .camproj import build_mapping, camera_coordinates, gather_camera_features, scale_mapping
from .const import LOGGER
from .data import CameraModel, CamRVMapping, PointCloud, ProjectionIndex, RangeImage, SensorConfig
from .dataio import SyntheticSceneSpec, gen_synthetic
from .network import FusionModule, PyFuConfig, PyFuNetwork, image_tensor, range_tensor
from .numcore import (
    Module,
    Tensor,
    bilinear_resize,
    bilinear_sample,
    check_mode,
    conv2d,
    gradcheck,
    mul,
    norm_act,
    sum_all,
    weighted_ce_softmax,
)
from .postprocess import KnnConfig, brute_force_knn_oracle, knn_postprocess
from .rangeview import overlap_intervals, project_cloud
from .traineval import ConfusionMatrix, build_sample, iou_miou

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

BLOCK_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
PROJECTION_POINTS = 10_000
KNN_INSTANCES = 100
MICRO_CHANNELS = 4


@dataclass
class CheckResult:
    """Outcome of one oracle comparison."""

    suite: str
    name: str
    passed: bool
    detail: str


# Gradient suite


def _projected_loss(
    forward: Callable[[], Tensor],
    rng: np.random.Generator,
) -> Callable[[], Tensor]:
    """Turn a forward into a scalar by a fixed random projection of its output."""
    projection = Tensor(rng.normal(size=forward().shape))
    return lambda: sum_all(mul(forward(), projection))


def _gradient_result(name: str, error: float, tolerance: float) -> CheckResult:
    return CheckResult("gradient", name, error < tolerance, f"relative error {error:.2e}")


def _random_input(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_kernel(
    name: str,
    forward: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
) -> CheckResult:
    error = gradcheck(_projected_loss(forward, rng), tensors, seed=int(rng.integers(1 << 31)))
    return _gradient_result(name, error, BLOCK_TOLERANCE)


def _check_module(
    name: str,
    module: Module,
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    **kwargs: object,
) -> CheckResult:
    module.train()
    tensors = [*inputs, *(param.tensor for param in module.params())]
    return _check_kernel(name, lambda: module(*inputs, **kwargs), tensors, rng)


def random_mapping(
    grid: tuple[int, int],
    image_size: tuple[int, int],
    rng: np.random.Generator,
    *,
    density: float = 0.6,
) -> CamRVMapping:
    """Return a mapping with random sub-pixel coordinates on a random subset of a central window."""
    height, width = grid
    valid = np.zeros(grid, dtype=bool)
    window = (slice(height // 4, height - height // 4), slice(width // 4, width - width // 4))
    valid[window] = rng.random(valid[window].shape) < density
    valid[height // 2, width // 2] = True
    coords = np.zeros((*grid, 2))
    coords[..., 0] = rng.uniform(0, image_size[1] - 1, grid)
    coords[..., 1] = rng.uniform(0, image_size[0] - 1, grid)
    coords[~valid] = 0.0
    rows, columns = overlap_intervals(valid)
    return CamRVMapping(coords=coords, valid=valid, columns=columns, rows=rows, image_size=image_size)


def _micro_config() -> PyFuConfig:
    return PyFuConfig(
        num_classes=3,
        channels=MICRO_CHANNELS,
        lidar_stem=MICRO_CHANNELS,
        lidar_widths=(MICRO_CHANNELS,) * 6,
        camera_stem=MICRO_CHANNELS,
        camera_widths=(MICRO_CHANNELS,) * 4,
        expansion=2,
        bottleneck_ratio=2,
        dpc_dilations=((1, 1), (1, 2)),
        freeze_lidar=False,
        freeze_camera=False,
    )


def gradient_suite(rng: np.random.Generator, *, network: bool = True) -> list[CheckResult]:
    """Central-difference checks of every kernel and block in 64-bit mode."""
    results = []
    c = MICRO_CHANNELS
    with check_mode():
        x = _random_input(rng, 1, c, 6, 8)
        weight = _random_input(rng, 2 * c, c, 3, 3)
        bias = _random_input(rng, 2 * c)
        results.append(
            _check_kernel(
                "conv2d",
                lambda: conv2d(x, weight, bias, stride=(2, 1), padding=(1, 2), dilation=(1, 2)),
                [x, weight, bias],
                rng,
            )
        )
        depthwise = _random_input(rng, c, 1, 3, 3)
        results.append(
            _check_kernel(
                "conv2d depthwise",
                lambda: conv2d(x, depthwise, None, padding=(1, 1), groups=c),
                [x, depthwise],
                rng,
            )
        )
        grouped = _random_input(rng, c, 2, 3, 3)
        results.append(
            _check_kernel(
                "conv2d grouped",
                lambda: conv2d(x, grouped, None, padding=(1, 1), groups=c // 2),
                [x, grouped],
                rng,
            )
        )
        results.append(_check_kernel("bilinear_resize", lambda: bilinear_resize(x, 9, 13), [x], rng))
        scale = _random_input(rng, c)
        shift = _random_input(rng, c)
        results.append(
            _check_kernel("norm_act", lambda: norm_act(x, scale, shift, activation="identity"), [x, scale, shift], rng)
        )
        logits = _random_input(rng, 1, 3, 4, 5)
        targets = rng.integers(0, 3, size=(1, 4, 5))
        targets[0, 0, 0] = 255
        weights = rng.uniform(0.5, 2.0, 3)
        results.append(
            _check_kernel(
                "weighted_ce_softmax",
                lambda: weighted_ce_softmax(logits, targets, weights),
                [logits],
                rng,
            )
        )
        features = _random_input(rng, 1, c, 8, 16)
        mapping = random_mapping((6, 10), (8, 16), rng)
        results.append(
            _check_kernel(
                "bilinear_sample",
                lambda: bilinear_sample(features, mapping.coords, mapping.valid),
                [features],
                rng,
            )
        )
        results.append(
            _check_kernel(
                "gather_camera_features",
                lambda: gather_camera_features(features, mapping),
                [features],
                rng,
            )
        )

        fine = _random_input(rng, 1, c, 8, 16)
        mid = _random_input(rng, 1, c, 4, 8)
        coarse = _random_input(rng, 1, c, 2, 4)
        wide = _random_input(rng, 1, 2 * c, 4, 8)
        blocks: list[tuple[str, Module, list[Tensor]]] = [
            ("Conv2d", Conv2d(c, c, 3, rng, dilation=(1, 2), bias=True), [fine]),
            ("InvertedResidual", InvertedResidual(c, c, rng, expansion=2), [fine]),
            ("InvertedResidual strided", InvertedResidual(c, 2 * c, rng, stride=2, expansion=2), [fine]),
            ("BottleneckResidual", BottleneckResidual(c, 2 * c, rng, ratio=2), [fine]),
            ("BasicResidual", BasicResidual(c, c, rng), [fine]),
            ("LSFE", LSFE(c, c, rng), [fine]),
            ("DPC", DPC(c, c, rng, dilations=((1, 6), (1, 1), (6, 21))), [mid]),
            ("MismatchCorrection", MismatchCorrection(c, rng), [fine, mid]),
            ("TwoWayPyramid", PyramidProbe(TwoWayPyramid(c, 3, rng)), [fine, mid, coarse]),
            ("TwoWayFPN", PyramidProbe(TwoWayFPN([c, 2 * c, c], c, rng)), [fine, wide, coarse]),
        ]
        results.extend(_check_module(name, module, inputs, rng) for name, module, inputs in blocks)

        fusion = FusionModule(c, c, _micro_config(), rng)
        fusion.train()
        lidar = _random_input(rng, 1, c, 4, 16)
        camera = _random_input(rng, 1, c, 8, 16)
        rv_mapping = random_mapping((8, 32), (32, 64), rng)
        results.append(
            _check_kernel(
                "FusionModule",
                lambda: fusion(lidar, camera, rv_mapping, target_stride=(1, 1), lidar_stride=(2, 2)),
                [lidar, camera, *(param.tensor for param in fusion.params())],
                rng,
            )
        )
        if network:
            results.append(network_gradient_check(rng))
    return results


class PyramidProbe(Module):
    """Reduce the pyramid outputs to one tensor so every level reaches the loss."""

    def __init__(self, pyramid: TwoWayPyramid | TwoWayFPN) -> None:
        """Wrap a pyramid or an FPN."""
        self.pyramid = pyramid

    def forward(self, *features: Tensor) -> Tensor:
        """Return a scalar mixing every pyramid level."""
        outputs = self.pyramid(list(features))
        total = sum_all(outputs[0])
        for output in outputs[1:]:
            total = total + sum_all(mul(output, output))
        return total


def network_gradient_check(rng: np.random.Generator, *, params_checked: int = 12) -> CheckResult:
    """End-to-end check of the micro network on a tiny synthetic frame."""
    spec = SyntheticSceneSpec(
        seed=int(rng.integers(1 << 31)),
        frames=1,
        sensor=SensorConfig(height=8, width=32),
        image_size=(32, 64),
        focal=32.0,
    )
    bundle = gen_synthetic(spec)[0]
    sample = build_sample(bundle, spec.sensor)
    with check_mode():
        network = PyFuNetwork(_micro_config(), rng)
        range_input = range_tensor(sample.range_image, network.config)
        image = image_tensor(sample.image)
        range_input.requires_grad = True
        params = network.params()
        stride = max(1, len(params) // params_checked)
        tensors = [range_input, *(param.tensor for param in params[::stride])]
        forward = lambda: network(range_input, image, sample.mapping).logits  # noqa: E731
        error = gradcheck(_projected_loss(forward, rng), tensors, samples=4, seed=int(rng.integers(1 << 31)))
    return _gradient_result("PyFuNetwork micro", error, NETWORK_TOLERANCE)


# Projection suite


def random_cloud(rng: np.random.Generator, count: int, *, near: float = 1.0, far: float = 50.0) -> PointCloud:
    """Return points with random directions and ranges."""
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    directions[:, 2] *= 0.4
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    ranges = rng.uniform(near, far, count)
    points = np.concatenate([directions * ranges[:, None], rng.random((count, 1))], axis=1)
    return PointCloud(points, rng.integers(0, 6, count))


def frustum_oracle(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Per-point visibility by explicit pinhole arithmetic."""
    height, width = camera.image_size
    visible = np.zeros(len(points), dtype=bool)
    for position, point in enumerate(np.asarray(points, dtype=np.float64)[:, :3]):
        x, y, z = camera.rotation @ point + camera.translation
        if z <= 0:
            continue
        column = camera.fx * x / z + camera.cx
        row = camera.fy * y / z + camera.cy
        visible[position] = 0 <= column < width and 0 <= row < height
    return visible


def naive_bilinear(features: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample a (C, H, W) map at one clamped sub-pixel location."""
    _, height, width = features.shape
    x = min(max(x, 0.0), width - 1)
    y = min(max(y, 0.0), height - 1)
    x0, y0 = math.floor(x), math.floor(y)
    x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0
    return (
        features[:, y0, x0] * (1 - fx) * (1 - fy)
        + features[:, y0, x1] * fx * (1 - fy)
        + features[:, y1, x0] * (1 - fx) * fy
        + features[:, y1, x1] * fx * fy
    )


def projection_suite(rng: np.random.Generator, points: int = PROJECTION_POINTS) -> list[CheckResult]:
    """Point/pixel round trips, frustum validity, scaled mappings and gather against oracles."""
    sensor = SensorConfig(height=32, width=256)
    camera = SyntheticSceneSpec().camera
    cloud = random_cloud(rng, points)
    range_image, index = project_cloud(cloud, sensor)
    results = []

    stored = index.pixel_to_point
    kept = stored[stored >= 0]
    rows, columns = np.nonzero(stored >= 0)
    round_trip = np.array_equal(index.v[kept], rows) and np.array_equal(index.u[kept], columns)
    nearest = bool(np.all(cloud.ranges[stored[index.v, index.u]] <= cloud.ranges))
    results.append(CheckResult("projection", "point/pixel round trip", round_trip and nearest, f"{kept.size} pixels"))

    mapping = build_mapping(cloud, index, camera)
    oracle = frustum_oracle(cloud.points[kept], camera)
    valid = np.zeros_like(mapping.valid)
    valid[rows, columns] = oracle
    results.append(
        CheckResult(
            "projection",
            "mapping validity vs frustum oracle",
            np.array_equal(valid, mapping.valid),
            f"{int(valid.sum())} valid pixels",
        )
    )

    consistent = True
    for scale in ((2, 2), (2, 8), (4, 16)):
        feature_size = (camera.image_size[0] // 4, camera.image_size[1] // 4)
        scaled = scale_mapping(mapping, scale, feature_size)
        factors = np.array([feature_size[1] / camera.image_size[1], feature_size[0] / camera.image_size[0]])
        for row, column in zip(*np.nonzero(scaled.valid), strict=True):
            block = mapping.valid[row * scale[0] : (row + 1) * scale[0], column * scale[1] : (column + 1) * scale[1]]
            members = mapping.coords[row * scale[0] : (row + 1) * scale[0], column * scale[1] : (column + 1) * scale[1]]
            candidates = members[block] * factors
            if not np.any(np.all(np.abs(candidates - scaled.coords[row, column]) < 1e-9, axis=1)):
                consistent = False
        consistent &= np.array_equal(
            scaled.valid,
            np.add.reduceat(
                np.add.reduceat(
                    np.pad(
                        mapping.valid,
                        ((0, -mapping.valid.shape[0] % scale[0]), (0, -mapping.valid.shape[1] % scale[1])),
                    ).astype(int),
                    np.arange(0, scaled.valid.shape[0] * scale[0], scale[0]),
                    axis=0,
                ),
                np.arange(0, scaled.valid.shape[1] * scale[1], scale[1]),
                axis=1,
            )
            > 0,
        )
    results.append(CheckResult("projection", "scaled mapping vs full resolution", consistent, "strides 2x2, 2x8, 4x16"))

    with check_mode():
        features = Tensor(rng.normal(size=(1, 3, *camera.image_size)))
        gathered = gather_camera_features(features, mapping).data[0]
    worst = 0.0
    for row, column in zip(*np.nonzero(mapping.valid), strict=True):
        expected = naive_bilinear(features.data[0], *mapping.coords[row, column])
        worst = max(worst, float(np.abs(gathered[:3, row, column] - expected).max()))
    exact = worst < 1e-12 and bool(np.all(gathered[:3, ~mapping.valid] == 0))
    results.append(CheckResult("projection", "gather vs naive bilinear", exact, f"max deviation {worst:.1e}"))

    _, visible = camera_coordinates(cloud.points, camera)
    results.append(
        CheckResult(
            "projection",
            "camera visibility vs frustum oracle",
            np.array_equal(visible, frustum_oracle(cloud.points, camera)),
            f"{int(visible.sum())} of {len(cloud)} points",
        )
    )
    return results


# kNN suite


def random_knn_instance(
    rng: np.random.Generator,
    sensor: SensorConfig,
    points: int,
    num_classes: int = 6,
) -> tuple[PointCloud, ProjectionIndex, RangeImage, np.ndarray, KnnConfig]:
    """Return (cloud, index, range_image, pixel_labels, config) for an oracle comparison."""
    cloud = random_cloud(rng, points, near=1.0, far=float(rng.uniform(3.0, 40.0)))
    range_image, index = project_cloud(cloud, sensor)
    pixel_labels = rng.integers(0, num_classes, size=range_image.mask.shape)
    pixel_labels[rng.random(pixel_labels.shape) < 0.05] = -1  # noqa: PLR2004
    window = int(rng.choice([1, 3, 5, 7]))
    config = KnnConfig(
        window=window,
        k=int(rng.integers(1, window * window + 1)),
        cutoff=float(rng.uniform(0.0, 3.0)),
        sigma=float(rng.uniform(0.5, 2.0)),
        weighted=bool(rng.integers(2)),
    )
    return cloud, index, range_image, pixel_labels, config


def knn_suite(
    rng: np.random.Generator,
    instances: int = KNN_INSTANCES,
    points: int = 500,
) -> list[CheckResult]:
    """Compare the vectorized kNN refinement with the loop oracle on random instances."""
    sensor = SensorConfig(height=32, width=256)
    mismatches = 0
    for _ in range(instances):
        cloud, index, range_image, pixel_labels, config = random_knn_instance(rng, sensor, points)
        fast = knn_postprocess(cloud, index, range_image, pixel_labels, config)
        slow = brute_force_knn_oracle(cloud, index, range_image, pixel_labels, config)
        mismatches += int(not np.array_equal(fast, slow))
    return [
        CheckResult(
            "knn",
            "knn_postprocess vs brute-force oracle",
            mismatches == 0,
            f"{instances - mismatches} of {instances} instances identical",
        )
    ]


# Metrics suite


def metrics_suite() -> list[CheckResult]:
    """Hand-computed confusion matrix and the overlap-masking mutation test."""
    result = iou_miou(ConfusionMatrix.from_counts(np.array([[3, 1], [2, 4]])))
    hand = bool(
        abs(result.iou[0] - 0.5) < 1e-12  # noqa: PLR2004
        and abs(result.iou[1] - 4 / 7) < 1e-12  # noqa: PLR2004
        and abs(result.miou - 0.5357) < 1e-4  # noqa: PLR2004
    )
    targets = np.array([0, 1, 1, 0, 1])
    predictions = np.array([0, 1, 0, 0, 1])
    overlap = np.array([True, True, False, True, True])
    baseline = ConfusionMatrix(2).update(predictions, targets, overlap).counts
    mutated = predictions.copy()
    mutated[~overlap] = 1 - mutated[~overlap]
    masked = np.array_equal(baseline, ConfusionMatrix(2).update(mutated, targets, overlap).counts)
    return [
        CheckResult("metrics", "IoU of [[3,1],[2,4]]", hand, f"IoU {result.iou.tolist()} mIoU {result.miou:.4f}"),
        CheckResult("metrics", "overlap masking", masked, "outside-overlap mutation leaves counts unchanged"),
    ]


def run_selftest(seed: int = 0, *, quick: bool = False) -> list[CheckResult]:
    """Run every suite; `quick` skips the end-to-end network check and shrinks the kNN suite."""
    rng = np.random.default_rng(seed)
    started = time.monotonic()
    results = [
        *gradient_suite(rng, network=not quick),
        *projection_suite(rng),
        *knn_suite(rng, instances=10 if quick else KNN_INSTANCES),
        *metrics_suite(),
    ]
    failed = [result for result in results if not result.passed]
    for result in failed:
        LOGGER.error("Selftest %s / %s failed: %s", result.suite, result.name, result.detail)
    LOGGER.info(
        "Selftest finished in %.1fs: %s of %s checks passed",
        time.monotonic() - started,
        len(results) - len(failed),
        len(results),
    )
    return results
