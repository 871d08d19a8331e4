"""kNN refinement of range-view predictions back onto every 3D point."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .const import (
    DEFAULT_KNN_CUTOFF,
    DEFAULT_KNN_K,
    DEFAULT_KNN_SIGMA,
    DEFAULT_KNN_WINDOW,
    LOGGER,
)
from .data import PointCloud, ProjectionIndex, RangeImage
from .errors import PyFuShapeError, PyFuValueError

POINT_CHUNK = 8192
NO_LABEL = -1


@dataclass(frozen=True)
class KnnConfig:
    """Neighbourhood search parameters."""

    window: int = DEFAULT_KNN_WINDOW
    k: int = DEFAULT_KNN_K
    cutoff: float = DEFAULT_KNN_CUTOFF
    sigma: float = DEFAULT_KNN_SIGMA
    weighted: bool = True

    def __post_init__(self) -> None:
        """Validate the window, neighbour count, cutoff and sigma."""
        if self.window < 1 or self.window % 2 == 0:
            msg = f"kNN window must be a positive odd number, got {self.window}"
            raise PyFuValueError(msg)
        if not 1 <= self.k <= self.window * self.window:
            msg = f"k must lie in [1, {self.window * self.window}], got {self.k}"
            raise PyFuValueError(msg)
        if self.cutoff < 0 or self.sigma <= 0:
            msg = f"Cutoff must be >= 0 and sigma > 0, got cutoff={self.cutoff} sigma={self.sigma}"
            raise PyFuValueError(msg)


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    """Return the sum-normalized 2D gaussian over a window, row-major."""
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    squared = offsets[:, None] ** 2 + offsets[None, :] ** 2
    kernel = np.exp(-squared / (2.0 * sigma * sigma))
    return (kernel / kernel.sum()).reshape(-1)


def _window_offsets(window: int) -> tuple[np.ndarray, np.ndarray]:
    half = window // 2
    dy, dx = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    return dy.reshape(-1), dx.reshape(-1)


def _check_inputs(
    cloud: PointCloud,
    index: ProjectionIndex,
    range_image: RangeImage,
    pixel_labels: np.ndarray,
) -> None:
    if index.u.shape[0] != len(cloud):
        msg = f"Projection index covers {index.u.shape[0]} points, cloud has {len(cloud)}"
        raise PyFuShapeError(msg)
    if pixel_labels.shape != range_image.mask.shape:
        msg = f"Pixel labels {pixel_labels.shape} do not match range image {range_image.mask.shape}"
        raise PyFuShapeError(msg)


class _Neighbourhood:
    """Padded rasters and kernel shared by every point chunk."""

    def __init__(self, range_image: RangeImage, pixel_labels: np.ndarray, config: KnnConfig) -> None:
        self.config = config
        self.pad = config.window // 2
        labels = np.asarray(pixel_labels, dtype=np.int64)
        usable = range_image.mask & (labels >= 0)
        self.ranges = np.pad(range_image.range.astype(np.float64), self.pad)
        self.usable = np.pad(usable, self.pad)
        self.labels = np.pad(np.where(usable, labels, NO_LABEL), self.pad, constant_values=NO_LABEL)
        self.own_labels = labels
        self.dy, self.dx = _window_offsets(config.window)
        self.center = (config.window * config.window) // 2
        kernel = gaussian_kernel(config.window, config.sigma)
        self.inverse = 1.0 - kernel
        self.votes = kernel if config.weighted else np.ones_like(kernel)
        self.num_labels = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0

    def refine(self, u: np.ndarray, v: np.ndarray, point_range: np.ndarray) -> np.ndarray:
        """Return refined labels for one chunk of points."""
        rows = v[:, None] + self.dy[None, :] + self.pad
        columns = u[:, None] + self.dx[None, :] + self.pad
        window_range = self.ranges[rows, columns]
        window_range[:, self.center] = point_range
        distance = np.abs(window_range - point_range[:, None]) * self.inverse[None, :]
        distance = np.where(self.usable[rows, columns], distance, np.inf)

        nearest = np.argsort(distance, axis=1, kind="stable")[:, : self.config.k]
        nearest_distance = np.take_along_axis(distance, nearest, axis=1)
        nearest_label = np.take_along_axis(self.labels[rows, columns], nearest, axis=1)
        survives = nearest_distance <= self.config.cutoff

        count = u.shape[0]
        result = self.own_labels[v, u].copy()
        if self.num_labels == 0:
            return result
        tally = np.zeros((count, self.num_labels), dtype=np.float64)
        owner = np.broadcast_to(np.arange(count)[:, None], nearest.shape)
        np.add.at(tally, (owner[survives], nearest_label[survives]), self.votes[nearest[survives]])
        voted = survives.any(axis=1)
        result[voted] = tally[voted].argmax(axis=1)
        return result


def knn_postprocess(  # noqa: PLR0913
    cloud: PointCloud,
    index: ProjectionIndex,
    range_image: RangeImage,
    pixel_labels: np.ndarray,
    config: KnnConfig,
    *,
    workers: int = 1,
) -> np.ndarray:
    """
    Relabel every point by a vote among its range-nearest window neighbours.

    The centre pixel takes the point's own range, so it always competes at
    distance 0. Unusable pixels (empty, or labelled -1) never vote. Points
    without surviving neighbours keep the label of their own pixel.
    """
    _check_inputs(cloud, index, range_image, pixel_labels)
    neighbourhood = _Neighbourhood(range_image, pixel_labels, config)
    point_range = cloud.ranges
    bounds = [(start, min(start + POINT_CHUNK, len(cloud))) for start in range(0, len(cloud), POINT_CHUNK)]

    def _chunk(bound: tuple[int, int]) -> np.ndarray:
        start, stop = bound
        return neighbourhood.refine(index.u[start:stop], index.v[start:stop], point_range[start:stop])

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk, bounds))
    else:
        parts = [_chunk(bound) for bound in bounds]
    labels = np.concatenate(parts)
    LOGGER.debug(
        "kNN refinement changed %s of %s point labels",
        int(np.count_nonzero(labels != np.asarray(pixel_labels)[index.v, index.u])),
        len(cloud),
    )
    return labels


def brute_force_knn_oracle(
    cloud: PointCloud,
    index: ProjectionIndex,
    range_image: RangeImage,
    pixel_labels: np.ndarray,
    config: KnnConfig,
) -> np.ndarray:
    """Reference implementation of knn_postprocess with plain loops; for verification."""
    _check_inputs(cloud, index, range_image, pixel_labels)
    height, width = range_image.mask.shape
    half = config.window // 2
    kernel = gaussian_kernel(config.window, config.sigma).tolist()
    ranges = range_image.range.astype(np.float64)
    point_ranges = cloud.ranges.tolist()
    out = np.empty(len(cloud), dtype=np.int64)
    for point in range(len(cloud)):
        u = int(index.u[point])
        v = int(index.v[point])
        own = point_ranges[point]
        candidates = []
        slot = 0
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                row, column = v + dy, u + dx
                inside = 0 <= row < height and 0 <= column < width
                label = int(pixel_labels[row, column]) if inside else NO_LABEL
                if inside and range_image.mask[row, column] and label >= 0:
                    pixel_range = own if (dy, dx) == (0, 0) else float(ranges[row, column])
                    distance = abs(pixel_range - own) * (1.0 - kernel[slot])
                else:
                    distance, label = float("inf"), NO_LABEL
                candidates.append((distance, label, kernel[slot]))
                slot += 1
        nearest = sorted(candidates, key=lambda item: item[0])[: config.k]
        tally: dict[int, float] = {}
        for distance, label, weight in nearest:
            if distance <= config.cutoff:
                tally[label] = tally.get(label, 0.0) + (weight if config.weighted else 1.0)
        if tally:
            best = max(tally.values())
            out[point] = min(label for label, votes in tally.items() if votes == best)
        else:
            out[point] = int(pixel_labels[v, u])
    return out
