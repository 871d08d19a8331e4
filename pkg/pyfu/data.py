"""Custom types for PyFu."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .const import (
    DEFAULT_FOV_DOWN,
    DEFAULT_FOV_UP,
    DEFAULT_SENSOR_HEIGHT,
    DEFAULT_SENSOR_WIDTH,
)
from .errors import PyFuDataError, PyFuValueError

ORTHONORMAL_TOLERANCE = 1e-6


def point_ranges(points: np.ndarray) -> np.ndarray:
    """Return the euclidean range of every point in 64-bit precision."""
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    return np.sqrt(np.sum(xyz * xyz, axis=1))


@dataclass(frozen=True)
class SensorConfig:
    """Range-view geometry of a rotating lidar."""

    height: int = DEFAULT_SENSOR_HEIGHT
    width: int = DEFAULT_SENSOR_WIDTH
    fov_up: float = DEFAULT_FOV_UP
    fov_down: float = DEFAULT_FOV_DOWN

    def __post_init__(self) -> None:
        """Validate raster size and vertical field of view."""
        if self.height < 1 or self.width < 1:
            msg = f"Range view must be at least 1x1, got {self.height}x{self.width}"
            raise PyFuValueError(msg)
        if self.fov_up <= self.fov_down:
            msg = f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})"
            raise PyFuValueError(msg)


@dataclass
class PointCloud:
    """Lidar scan of N points (x, y, z, remission) with optional class labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Reject empty clouds and points at the sensor origin."""
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 4:  # noqa: PLR2004
            msg = f"Point array must be Nx4, got {self.points.shape}"
            raise PyFuDataError(msg)
        if self.points.shape[0] < 1:
            msg = "Point cloud is empty"
            raise PyFuDataError(msg)
        zero = np.flatnonzero(point_ranges(self.points) == 0.0)
        if zero.size:
            msg = f"Point cloud contains {zero.size} point(s) at range 0 (first {zero[0]})"
            raise PyFuDataError(msg)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                msg = (
                    f"Label count {self.labels.shape} does not match "
                    f"point count {self.points.shape[0]}"
                )
                raise PyFuDataError(msg)

    def __len__(self) -> int:
        """Return the number of points."""
        return int(self.points.shape[0])

    @property
    def ranges(self) -> np.ndarray:
        """Return per-point ranges."""
        return point_ranges(self.points)


@dataclass
class ProjectionIndex:
    """Bidirectional point <-> pixel correspondence of a spherical projection."""

    u: np.ndarray
    v: np.ndarray
    in_fov: np.ndarray
    pixel_to_point: np.ndarray

    @property
    def kept(self) -> np.ndarray:
        """Return the mask of points stored in their pixel."""
        kept = np.zeros(self.u.shape[0], dtype=bool)
        stored = self.pixel_to_point[self.pixel_to_point >= 0]
        kept[stored] = True
        return kept


@dataclass
class RangeImage:
    """Five-channel range raster (range, x, y, z, remission) with mask and labels."""

    channels: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    @property
    def height(self) -> int:
        """Return raster rows."""
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        """Return raster columns."""
        return int(self.mask.shape[1])

    @property
    def range(self) -> np.ndarray:
        """Return the range channel."""
        return self.channels[0]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with lidar->camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        """Validate focal lengths and the rotation matrix."""
        if self.fx <= 0 or self.fy <= 0:
            msg = f"Focal lengths must be positive, got fx={self.fx} fy={self.fy}"
            raise PyFuDataError(msg)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        deviation = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if deviation > ORTHONORMAL_TOLERANCE:
            msg = f"Extrinsic rotation is not orthonormal (max deviation {deviation:.3g})"
            raise PyFuDataError(msg)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        """Transform lidar-frame points into the camera frame."""
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, camera_xyz: np.ndarray) -> np.ndarray:
        """Project camera-frame points to sub-pixel image coordinates (x, y)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = self.fx * camera_xyz[:, 0] / camera_xyz[:, 2] + self.cx
            yc = self.fy * camera_xyz[:, 1] / camera_xyz[:, 2] + self.cy
        return np.stack([xc, yc], axis=1)


@dataclass
class CamRVMapping:
    """Per range-view cell camera coordinates, validity and overlap intervals."""

    coords: np.ndarray
    valid: np.ndarray
    columns: tuple[int, int]
    rows: tuple[int, int]
    image_size: tuple[int, int]
    stride: tuple[int, int] = (1, 1)

    @property
    def grid_size(self) -> tuple[int, int]:
        """Return (rows, columns) of the mapping grid."""
        return int(self.valid.shape[0]), int(self.valid.shape[1])

    @property
    def has_overlap(self) -> bool:
        """Return True when both overlap intervals are nonempty."""
        return self.columns[1] > self.columns[0] and self.rows[1] > self.rows[0]


@dataclass
class FrameBundle:
    """One synchronized lidar scan + camera image with calibration."""

    frame_id: str
    cloud: PointCloud
    image: np.ndarray
    camera: CameraModel
    image_labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Check that the image matches the camera model."""
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.shape != (*self.camera.image_size, 3):
            msg = (
                f"Image of frame {self.frame_id} has shape {self.image.shape}, "
                f"camera expects {(*self.camera.image_size, 3)}"
            )
            raise PyFuDataError(msg)

    @property
    def labels(self) -> np.ndarray | None:
        """Return the point labels, if any."""
        return self.cloud.labels


@dataclass
class RangeViewSample:
    """Aligned training sample: range image, camera mapping and camera image."""

    range_image: RangeImage
    mapping: CamRVMapping
    image: np.ndarray
    image_labels: np.ndarray | None = None
    frame_id: str = ""
    cloud: PointCloud | None = None
    index: ProjectionIndex | None = None
