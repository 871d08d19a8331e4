"""Lidar-camera pyramid fusion for range-view semantic segmentation, in plain numpy."""

from __future__ import annotations

from .const import DOMAIN, LOGGER, VERSION
from .data import CameraModel, CamRVMapping, FrameBundle, PointCloud, RangeImage, SensorConfig
from .errors import (
    PyFuConfigError,
    PyFuDataError,
    PyFuError,
    PyFuNumericalError,
    PyFuOverlapError,
    PyFuShapeError,
    PyFuValueError,
)
from .network import PyFuConfig, PyFuNetwork, pyfu_forward
from .postprocess import KnnConfig, knn_postprocess

__version__ = VERSION

__all__ = [
    "DOMAIN",
    "LOGGER",
    "CamRVMapping",
    "CameraModel",
    "FrameBundle",
    "KnnConfig",
    "PointCloud",
    "PyFuConfig",
    "PyFuConfigError",
    "PyFuDataError",
    "PyFuError",
    "PyFuNetwork",
    "PyFuNumericalError",
    "PyFuOverlapError",
    "PyFuShapeError",
    "PyFuValueError",
    "RangeImage",
    "SensorConfig",
    "__version__",
    "knn_postprocess",
    "pyfu_forward",
]
