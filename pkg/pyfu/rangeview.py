"""Spherical range-view projection, overlap cropping and range-view augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, overload

import numpy as np

from .const import IGNORE_LABEL, LOGGER, RANGE_CHANNEL_MEANS, RANGE_CHANNEL_STDS
from .data import (
    PointCloud,
    ProjectionIndex,
    RangeImage,
    RangeViewSample,
    SensorConfig,
    point_ranges,
)
from .errors import PyFuShapeError, PyFuValueError
from .numcore import Tensor, crop

if TYPE_CHECKING:
    from collections.abc import Sequence

RANGE_CHANNELS = 5
DEFAULT_FLIP_PROBABILITY = 0.5

Interval = tuple[int, int]


def spherical_project(cloud: PointCloud, sensor: SensorConfig) -> ProjectionIndex:
    """Project every point to its (u, v) pixel; nearest point wins each pixel."""
    points = cloud.points.astype(np.float64)
    ranges = point_ranges(points)
    yaw = np.arctan2(points[:, 1], points[:, 0])
    pitch = np.arcsin(np.clip(points[:, 2] / ranges, -1.0, 1.0))
    fov_up = np.radians(sensor.fov_up)
    fov_down = np.radians(sensor.fov_down)

    u_float = 0.5 * (1.0 - yaw / np.pi) * sensor.width
    v_float = (1.0 - (pitch - fov_down) / (fov_up - fov_down)) * sensor.height
    u = np.clip(np.floor(u_float), 0, sensor.width - 1).astype(np.int64)
    v = np.clip(np.floor(v_float), 0, sensor.height - 1).astype(np.int64)
    in_fov = (pitch >= fov_down) & (pitch <= fov_up)

    pixel = v * sensor.width + u
    # Sort by pixel, then range, then point index: the first of each run is kept.
    order = np.lexsort((np.arange(len(cloud)), ranges, pixel))
    sorted_pixels = pixel[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_pixels[1:] != sorted_pixels[:-1]
    winners = order[first]
    pixel_to_point = np.full(sensor.height * sensor.width, -1, dtype=np.int64)
    pixel_to_point[pixel[winners]] = winners

    outside = int(np.count_nonzero(~in_fov))
    if outside:
        LOGGER.debug("%s of %s points lie outside the vertical field of view", outside, len(cloud))
    return ProjectionIndex(
        u=u,
        v=v,
        in_fov=in_fov,
        pixel_to_point=pixel_to_point.reshape(sensor.height, sensor.width),
    )


def build_range_image(cloud: PointCloud, index: ProjectionIndex, sensor: SensorConfig) -> RangeImage:
    """Rasterize the kept points into a five-channel range image."""
    if index.u.shape[0] != len(cloud):
        msg = f"Projection index covers {index.u.shape[0]} points, cloud has {len(cloud)}"
        raise PyFuShapeError(msg)
    if index.pixel_to_point.shape != (sensor.height, sensor.width):
        msg = (
            f"Projection index raster {index.pixel_to_point.shape} does not match "
            f"sensor {sensor.height}x{sensor.width}"
        )
        raise PyFuShapeError(msg)
    stored = index.pixel_to_point
    mask = stored >= 0
    kept = stored[mask]

    channels = np.zeros((RANGE_CHANNELS, sensor.height, sensor.width), dtype=np.float32)
    channels[0][mask] = cloud.ranges[kept]
    for channel in range(4):
        channels[channel + 1][mask] = cloud.points[kept, channel]

    labels = np.full((sensor.height, sensor.width), IGNORE_LABEL, dtype=np.int64)
    if cloud.labels is not None:
        labels[mask] = cloud.labels[kept]
    return RangeImage(channels=channels, mask=mask, labels=labels)


def project_cloud(cloud: PointCloud, sensor: SensorConfig) -> tuple[RangeImage, ProjectionIndex]:
    """Project and rasterize a cloud in one call."""
    index = spherical_project(cloud, sensor)
    return build_range_image(cloud, index, sensor), index


def normalize_channels(
    range_image: RangeImage,
    means: Sequence[float] = RANGE_CHANNEL_MEANS,
    stds: Sequence[float] = RANGE_CHANNEL_STDS,
) -> np.ndarray:
    """Standardize each channel; invalid pixels stay 0."""
    mean = np.asarray(means, dtype=np.float32)[:, None, None]
    std = np.asarray(stds, dtype=np.float32)[:, None, None]
    normalized = (range_image.channels - mean) / std
    normalized[:, ~range_image.mask] = 0.0
    return normalized.astype(np.float32)


def overlap_intervals(valid: np.ndarray) -> tuple[Interval, Interval]:
    """Return the tight (rows, columns) half-open bounds of a validity mask."""
    rows = np.flatnonzero(valid.any(axis=1))
    columns = np.flatnonzero(valid.any(axis=0))
    if rows.size == 0:
        return (0, 0), (0, 0)
    return (int(rows[0]), int(rows[-1]) + 1), (int(columns[0]), int(columns[-1]) + 1)


def overlap_window(
    columns: Interval,
    rows: Interval,
    stride: tuple[int, int] = (1, 1),
) -> tuple[Interval, Interval]:
    """Divide full-resolution overlap intervals by a feature stride (floor start, ceil end)."""
    sy, sx = stride
    if sy < 1 or sx < 1:
        msg = f"Stride must be at least 1, got {stride}"
        raise PyFuValueError(msg)
    row_window = (rows[0] // sy, -(-rows[1] // sy))
    column_window = (columns[0] // sx, -(-columns[1] // sx))
    if row_window[1] <= row_window[0] or column_window[1] <= column_window[0]:
        msg = f"Overlap columns {columns} rows {rows} are empty at stride {stride}"
        raise PyFuValueError(msg)
    return row_window, column_window


@overload
def crop_to_overlap(
    x: Tensor, columns: Interval, rows: Interval, stride: tuple[int, int] = (1, 1)
) -> Tensor: ...


@overload
def crop_to_overlap(
    x: np.ndarray, columns: Interval, rows: Interval, stride: tuple[int, int] = (1, 1)
) -> np.ndarray: ...


def crop_to_overlap(
    x: Tensor | np.ndarray,
    columns: Interval,
    rows: Interval,
    stride: tuple[int, int] = (1, 1),
) -> Tensor | np.ndarray:
    """Crop the last two axes to the overlap window at the given stride."""
    (r0, r1), (c0, c1) = overlap_window(columns, rows, stride)
    if isinstance(x, Tensor):
        return crop(x, (r0, r1), (c0, c1))
    height, width = x.shape[-2:]
    if r1 > height or c1 > width:
        msg = f"Overlap window rows [{r0},{r1}) columns [{c0},{c1}) exceeds a {height}x{width} raster"
        raise PyFuValueError(msg)
    return x[..., r0:r1, c0:c1]


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation switches."""

    flip_probability: float = DEFAULT_FLIP_PROBABILITY
    crop_size: tuple[int, int] | None = None


def hflip(sample: RangeViewSample) -> RangeViewSample:
    """Mirror every aligned raster and the camera side horizontally."""
    image = sample.range_image
    width = image.width
    mapping = sample.mapping
    camera_width = mapping.image_size[1]

    flipped_coords = mapping.coords[:, ::-1].copy()
    flipped_valid = mapping.valid[:, ::-1].copy()
    flipped_coords[..., 0] = np.where(flipped_valid, camera_width - 1 - flipped_coords[..., 0], 0.0)
    flipped_coords[..., 1] = np.where(flipped_valid, flipped_coords[..., 1], 0.0)
    columns = (width - mapping.columns[1], width - mapping.columns[0]) if mapping.has_overlap else mapping.columns

    index = sample.index
    if index is not None:
        index = replace(index, u=width - 1 - index.u, pixel_to_point=index.pixel_to_point[:, ::-1].copy())
    image_labels = None if sample.image_labels is None else sample.image_labels[:, ::-1].copy()
    return replace(
        sample,
        range_image=RangeImage(
            channels=image.channels[:, :, ::-1].copy(),
            mask=image.mask[:, ::-1].copy(),
            labels=image.labels[:, ::-1].copy(),
        ),
        mapping=replace(mapping, coords=flipped_coords, valid=flipped_valid, columns=columns),
        image=sample.image[:, ::-1].copy(),
        image_labels=image_labels,
        index=index,
    )


def _crop_offset(
    size: int,
    crop_size: int,
    overlap: Interval,
    rng: np.random.Generator,
    *,
    has_overlap: bool,
) -> int:
    """Draw a window start; with an overlap the window must intersect it."""
    if not has_overlap:
        return int(rng.integers(0, size - crop_size + 1))
    lowest = max(0, overlap[0] - crop_size + 1)
    highest = min(size - crop_size, overlap[1] - 1)
    return int(rng.integers(lowest, highest + 1))


def random_crop(sample: RangeViewSample, size: tuple[int, int], rng: np.random.Generator) -> RangeViewSample:
    """Crop the range-view rasters to `size`, preferring windows that keep camera overlap."""
    crop_h, crop_w = size
    image = sample.range_image
    if crop_h > image.height or crop_w > image.width or crop_h < 1 or crop_w < 1:
        msg = f"Crop size {size} does not fit a {image.height}x{image.width} range image"
        raise PyFuValueError(msg)
    mapping = sample.mapping
    top = _crop_offset(image.height, crop_h, mapping.rows, rng, has_overlap=mapping.has_overlap)
    left = _crop_offset(image.width, crop_w, mapping.columns, rng, has_overlap=mapping.has_overlap)
    window = (slice(top, top + crop_h), slice(left, left + crop_w))
    valid = mapping.valid[window].copy()
    rows, columns = overlap_intervals(valid)
    LOGGER.debug("Random crop at row %s column %s keeps overlap rows %s columns %s", top, left, rows, columns)
    return replace(
        sample,
        range_image=RangeImage(
            channels=image.channels[(slice(None), *window)].copy(),
            mask=image.mask[window].copy(),
            labels=image.labels[window].copy(),
        ),
        mapping=replace(mapping, coords=mapping.coords[window].copy(), valid=valid, rows=rows, columns=columns),
        index=None,
        cloud=None,
    )


def augment(
    sample: RangeViewSample,
    config: AugmentConfig,
    rng: np.random.Generator | int,
) -> RangeViewSample:
    """Apply the configured flip and crop; deterministic for a given seed."""
    generator = np.random.default_rng(rng) if isinstance(rng, int) else rng
    if config.crop_size is not None:
        sample = random_crop(sample, config.crop_size, generator)
    if generator.random() < config.flip_probability:
        sample = hflip(sample)
    return sample

