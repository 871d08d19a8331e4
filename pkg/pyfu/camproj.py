"""Scalable camera-image to range-view mapping and camera feature transformation."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .const import LOGGER
from .data import CameraModel, CamRVMapping, PointCloud, ProjectionIndex
from .errors import PyFuOverlapError, PyFuShapeError, PyFuValueError
from .numcore import Tensor, bilinear_sample, concat
from .rangeview import overlap_intervals, overlap_window


def camera_coordinates(points: np.ndarray, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Return sub-pixel image coordinates of lidar points and whether each is visible."""
    camera_xyz = camera.to_camera(np.asarray(points, dtype=np.float64)[:, :3])
    image_xy = camera.project(camera_xyz)
    height, width = camera.image_size
    with np.errstate(invalid="ignore"):
        visible = (
            (camera_xyz[:, 2] > 0)
            & (image_xy[:, 0] >= 0)
            & (image_xy[:, 0] < width)
            & (image_xy[:, 1] >= 0)
            & (image_xy[:, 1] < height)
        )
    return np.where(visible[:, None], image_xy, 0.0), visible


def build_mapping(cloud: PointCloud, index: ProjectionIndex, camera: CameraModel) -> CamRVMapping:
    """Map every occupied range-view pixel to camera image coordinates through its 3D point."""
    if index.u.shape[0] != len(cloud):
        msg = f"Projection index covers {index.u.shape[0]} points, cloud has {len(cloud)}"
        raise PyFuShapeError(msg)
    stored = index.pixel_to_point
    occupied = stored >= 0
    kept = stored[occupied]
    image_xy, visible = camera_coordinates(cloud.points[kept], camera)

    coords = np.zeros((*stored.shape, 2), dtype=np.float64)
    valid = np.zeros(stored.shape, dtype=bool)
    coords[occupied] = image_xy
    valid[occupied] = visible
    if not valid.any():
        msg = "No range-view pixel projects into the camera image; the sensors do not overlap"
        raise PyFuOverlapError(msg)
    rows, columns = overlap_intervals(valid)
    LOGGER.debug(
        "Camera mapping: %s valid pixels, overlap rows %s columns %s",
        int(valid.sum()),
        rows,
        columns,
    )
    return CamRVMapping(
        coords=coords,
        valid=valid,
        columns=columns,
        rows=rows,
        image_size=camera.image_size,
    )


def scale_mapping(
    mapping: CamRVMapping,
    rv_scale: tuple[int, int],
    cam_feature_size: tuple[int, int],
) -> CamRVMapping:
    """Reduce the range-view grid by `rv_scale` and rescale camera coordinates to a feature map."""
    sy, sx = rv_scale
    if sy < 1 or sx < 1:
        msg = f"Range-view scale must be at least 1, got {rv_scale}"
        raise PyFuValueError(msg)
    hf, wf = cam_feature_size
    hc, wc = mapping.image_size
    height, width = mapping.grid_size
    grid_h = -(-height // sy)
    grid_w = -(-width // sx)

    pad = ((0, grid_h * sy - height), (0, grid_w * sx - width))
    valid = np.pad(mapping.valid, pad)
    coords = np.pad(mapping.coords, (*pad, (0, 0)))
    # Members of each coarse cell in row-major order: argmax picks the top-left-most valid one.
    members = valid.reshape(grid_h, sy, grid_w, sx).transpose(0, 2, 1, 3).reshape(grid_h, grid_w, sy * sx)
    member_coords = coords.reshape(grid_h, sy, grid_w, sx, 2).transpose(0, 2, 1, 3, 4).reshape(
        grid_h, grid_w, sy * sx, 2
    )
    cell_valid = members.any(axis=2)
    chosen = np.take_along_axis(member_coords, members.argmax(axis=2)[:, :, None, None], axis=2)[:, :, 0]
    factors = np.array([wf / wc, hf / hc])
    scaled = np.where(cell_valid[..., None], chosen * factors, 0.0)

    rows, columns = (
        overlap_window(mapping.columns, mapping.rows, rv_scale) if mapping.has_overlap else ((0, 0), (0, 0))
    )
    return CamRVMapping(
        coords=scaled,
        valid=cell_valid,
        columns=columns,
        rows=rows,
        image_size=(hf, wf),
        stride=(mapping.stride[0] * sy, mapping.stride[1] * sx),
    )


def crop_mapping(mapping: CamRVMapping) -> CamRVMapping:
    """Restrict a mapping grid to its own overlap window."""
    if not mapping.has_overlap:
        msg = "Mapping has an empty overlap window"
        raise PyFuOverlapError(msg)
    (r0, r1), (c0, c1) = mapping.rows, mapping.columns
    return replace(
        mapping,
        coords=mapping.coords[r0:r1, c0:c1],
        valid=mapping.valid[r0:r1, c0:c1],
        rows=(0, r1 - r0),
        columns=(0, c1 - c0),
    )


def gather_camera_features(cam_features: Tensor, mapping: CamRVMapping) -> Tensor:
    """Resample camera features onto the mapping grid and append the validity channel."""
    if tuple(cam_features.shape[2:]) != tuple(mapping.image_size):
        msg = (
            f"Camera features {cam_features.shape} do not match the mapping's "
            f"feature size {mapping.image_size}"
        )
        raise PyFuShapeError(msg)
    sampled = bilinear_sample(cam_features, mapping.coords, mapping.valid)
    mask = Tensor(mapping.valid[None, None].astype(cam_features.dtype))
    return concat([sampled, mask], axis=1)
