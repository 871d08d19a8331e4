"""KITTI-style dataset files, synthetic scene generation and prediction export."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .const import (
    IGNORE_LABEL,
    LABEL_CLASS_MASK,
    LOGGER,
    SCAN_RECORD_BYTES,
    SKY_COLOR,
    SYNTHETIC_AMBIGUOUS_PAIR,
    SYNTHETIC_CLASSES,
    SYNTHETIC_PALETTE,
)
from .data import CameraModel, FrameBundle, PointCloud, SensorConfig
from .errors import PyFuDataError, PyFuValueError

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence
    from pathlib import Path

SCAN_DIR = "velodyne"
LABEL_DIR = "labels"
IMAGE_DIR = "image_2"
IMAGE_LABEL_DIR = "image_labels"
CALIB_FILE = "calib.txt"
PROJECTION_KEY = "P2"
EXTRINSIC_KEY = "Tr"
RECTIFICATION_KEY = "R0_rect"
LABEL_WORD_BYTES = 4
MAX_EXPORT_LABEL = 1 << 16
PIXEL_MAX = 255
RAW_LABEL_SPACE = LABEL_CLASS_MASK + 1

CLASS_GROUND, CLASS_WALL, CLASS_BOX, CLASS_CYLINDER = range(4)
SYNTHETIC_REMISSION = (0.30, 0.55, 0.60, 0.70, 0.40, 0.40)
# Lidar x forward / y left / z up to camera x right / y down / z forward.
LIDAR_TO_CAMERA = ((0.0, -1.0, 0.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))
RAY_EPSILON = 1e-6


# Binary files


def read_scan(path: Path) -> np.ndarray:
    """Read packed little-endian float32 (x, y, z, remission) records."""
    payload = path.read_bytes()
    if len(payload) % SCAN_RECORD_BYTES:
        msg = f"Scan {path} has {len(payload)} bytes, not a multiple of {SCAN_RECORD_BYTES}"
        raise PyFuDataError(msg)
    return np.frombuffer(payload, dtype="<f4").reshape(-1, 4).astype(np.float32)


def write_scan(points: np.ndarray, path: Path) -> None:
    """Write an Nx4 point array as packed little-endian float32."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(points, dtype="<f4").tobytes())


def read_labels(path: Path) -> np.ndarray:
    """Read 32-bit label words and return their lower 16 bits (the semantic class)."""
    payload = path.read_bytes()
    if len(payload) % LABEL_WORD_BYTES:
        msg = f"Label file {path} has {len(payload)} bytes, not a multiple of {LABEL_WORD_BYTES}"
        raise PyFuDataError(msg)
    words = np.frombuffer(payload, dtype="<u4")
    return (words & LABEL_CLASS_MASK).astype(np.int64)


def write_predictions(labels: np.ndarray, path: Path) -> None:
    """Write one little-endian 32-bit word per point with the class in the lower 16 bits."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= MAX_EXPORT_LABEL):
        msg = f"Labels must lie in [0, {MAX_EXPORT_LABEL}), got [{labels.min()}, {labels.max()}]"
        raise PyFuValueError(msg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(labels.astype("<u4").tobytes())


# Netpbm images


def _netpbm_header(payload: bytes, path: Path) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    offset = 0
    while len(tokens) < 4:  # noqa: PLR2004
        while offset < len(payload) and payload[offset : offset + 1].isspace():
            offset += 1
        if payload[offset : offset + 1] == b"#":
            offset = payload.find(b"\n", offset)
            if offset < 0:
                break
            continue
        start = offset
        while offset < len(payload) and not payload[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            break
        tokens.append(payload[start:offset])
    if len(tokens) < 4:  # noqa: PLR2004
        msg = f"Image {path} has an incomplete header"
        raise PyFuDataError(msg)
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError as exception:
        msg = f"Image {path} has a malformed header: {tokens}"
        raise PyFuDataError(msg) from exception
    if maxval != PIXEL_MAX:
        msg = f"Image {path} uses maxval {maxval}; only 8-bit images are supported"
        raise PyFuDataError(msg)
    return tokens[0], width, height, maxval, offset + 1


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    payload = path.read_bytes()
    found, width, height, _, offset = _netpbm_header(payload, path)
    if found != magic:
        msg = f"Image {path} has magic {found!r}, expected {magic!r}"
        raise PyFuDataError(msg)
    size = width * height * channels
    if len(payload) - offset < size:
        msg = f"Image {path} is truncated: {len(payload) - offset} of {size} pixel bytes"
        raise PyFuDataError(msg)
    pixels = np.frombuffer(payload, dtype=np.uint8, count=size, offset=offset)
    return pixels.reshape((height, width, channels) if channels > 1 else (height, width))


def _write_netpbm(path: Path, magic: bytes, pixels: np.ndarray) -> None:
    height, width = pixels.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, PIXEL_MAX)
    path.write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary P6 image as HxWx3 floats in [0, 1]."""
    return _read_netpbm(path, b"P6", 3).astype(np.float32) / PIXEL_MAX


def write_ppm(image: np.ndarray, path: Path) -> None:
    """Write HxWx3 floats in [0, 1] as a binary P6 image."""
    pixels = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * PIXEL_MAX)
    _write_netpbm(path, b"P6", pixels.astype(np.uint8))


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary P5 label image."""
    return _read_netpbm(path, b"P5", 1).astype(np.int64)


def write_pgm(labels: np.ndarray, path: Path) -> None:
    """Write per-pixel labels (0-255) as a binary P5 image."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > PIXEL_MAX):
        msg = f"PGM labels must lie in [0, {PIXEL_MAX}]"
        raise PyFuValueError(msg)
    _write_netpbm(path, b"P5", labels.astype(np.uint8))


def render_labels(labels: np.ndarray, palette: Sequence[Sequence[float]] = SYNTHETIC_PALETTE) -> np.ndarray:
    """Color a label raster; unlabelled pixels are black."""
    labels = np.asarray(labels, dtype=np.int64)
    colors = np.asarray(palette, dtype=np.float32)
    known = (labels >= 0) & (labels < len(colors))
    image = np.zeros((*labels.shape, 3), dtype=np.float32)
    image[known] = colors[labels[known]]
    return image


# Calibration


def read_calib(path: Path) -> dict[str, np.ndarray]:
    """Parse `key: numbers` lines; non-numeric lines are skipped."""
    values: dict[str, np.ndarray] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if ":" not in line:
            continue
        key, raw = line.split(":", 1)
        try:
            values[key.strip()] = np.array([float(number) for number in raw.split()])
        except ValueError:
            LOGGER.debug("Skipping non-numeric calibration entry %s", key.strip())
    return values


def _matrix(values: Mapping[str, np.ndarray], key: str, shape: tuple[int, int], path: Path) -> np.ndarray:
    if key not in values:
        msg = f"Calibration {path} has no {key} entry"
        raise PyFuDataError(msg)
    if values[key].size != shape[0] * shape[1]:
        msg = f"Calibration entry {key} in {path} has {values[key].size} values, expected {shape[0] * shape[1]}"
        raise PyFuDataError(msg)
    return values[key].reshape(shape)


def camera_from_calib(path: Path, image_size: tuple[int, int]) -> CameraModel:
    """
    Build the camera model from a projection matrix and the lidar-to-camera transform.

    The projection matrix's fourth column is folded into the extrinsic
    translation, and an optional rectifying rotation is applied first.
    """
    values = read_calib(path)
    projection = _matrix(values, PROJECTION_KEY, (3, 4), path)
    extrinsic = _matrix(values, EXTRINSIC_KEY, (3, 4), path)
    intrinsic = projection[:, :3]
    rotation = extrinsic[:, :3]
    translation = extrinsic[:, 3]
    if RECTIFICATION_KEY in values:
        rectification = _matrix(values, RECTIFICATION_KEY, (3, 3), path)
        rotation = rectification @ rotation
        translation = rectification @ translation
    try:
        translation = translation + np.linalg.solve(intrinsic, projection[:, 3])
    except np.linalg.LinAlgError as exception:
        msg = f"Projection matrix in {path} has a singular intrinsic part"
        raise PyFuDataError(msg) from exception
    return CameraModel(
        fx=float(intrinsic[0, 0]),
        fy=float(intrinsic[1, 1]),
        cx=float(intrinsic[0, 2]),
        cy=float(intrinsic[1, 2]),
        rotation=rotation,
        translation=translation,
        image_size=image_size,
    )


def write_calib(camera: CameraModel, path: Path) -> None:
    """Write P2 (intrinsics, zero fourth column) and Tr (lidar-to-camera)."""
    projection = np.zeros((3, 4))
    projection[:, :3] = [[camera.fx, 0.0, camera.cx], [0.0, camera.fy, camera.cy], [0.0, 0.0, 1.0]]
    extrinsic = np.concatenate([camera.rotation, camera.translation[:, None]], axis=1)
    lines = [
        f"{key}: " + " ".join(repr(float(value)) for value in matrix.reshape(-1))
        for key, matrix in ((PROJECTION_KEY, projection), (EXTRINSIC_KEY, extrinsic))
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# Label remapping


def load_label_map(path: Path) -> np.ndarray:
    """Read a `[labels]` table of raw id -> training id into a lookup array."""
    try:
        with path.open("rb") as handle:
            table = tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as exception:
        msg = f"Cannot read label map {path}: {exception}"
        raise PyFuDataError(msg) from exception
    if "labels" not in table:
        msg = f"Label map {path} has no [labels] table"
        raise PyFuDataError(msg)
    lookup = np.full(RAW_LABEL_SPACE, IGNORE_LABEL, dtype=np.int64)
    for raw, train_id in table["labels"].items():
        try:
            lookup[int(raw)] = int(train_id)
        except (ValueError, IndexError) as exception:
            msg = f"Label map {path} has an invalid entry {raw!r} = {train_id!r}"
            raise PyFuDataError(msg) from exception
    return lookup


# Dataset layout


def list_frames(root: Path) -> list[str]:
    """Return the sorted ids of every scan under `root`."""
    return sorted(path.stem for path in (root / SCAN_DIR).glob("*.bin"))


def load_frame(root: Path, frame_id: str, label_map: np.ndarray | None = None) -> FrameBundle:
    """Load one frame: scan, optional labels, camera image, optional image labels and calibration."""
    scan_path = root / SCAN_DIR / f"{frame_id}.bin"
    image_path = root / IMAGE_DIR / f"{frame_id}.ppm"
    for required in (scan_path, image_path, root / CALIB_FILE):
        if not required.is_file():
            msg = f"Frame {frame_id}: missing {required}"
            raise PyFuDataError(msg)
    points = read_scan(scan_path)
    label_path = root / LABEL_DIR / f"{frame_id}.label"
    labels = None
    if label_path.is_file():
        labels = read_labels(label_path)
        if label_map is not None:
            labels = label_map[labels]
    image = read_ppm(image_path)
    image_label_path = root / IMAGE_LABEL_DIR / f"{frame_id}.pgm"
    image_labels = read_pgm(image_label_path) if image_label_path.is_file() else None
    camera = camera_from_calib(root / CALIB_FILE, image.shape[:2])
    return FrameBundle(
        frame_id=frame_id,
        cloud=PointCloud(points, labels),
        image=image,
        camera=camera,
        image_labels=image_labels,
    )


def load_frames(root: Path, label_map: np.ndarray | None = None, limit: int | None = None) -> list[FrameBundle]:
    """Load the first `limit` frames (all by default)."""
    ids = list_frames(root)
    if not ids:
        msg = f"No scans found under {root / SCAN_DIR}"
        raise PyFuDataError(msg)
    return [load_frame(root, frame_id, label_map) for frame_id in ids[:limit]]


def write_frame(root: Path, bundle: FrameBundle) -> None:
    """Write one frame in the dataset layout (calibration included)."""
    write_scan(bundle.cloud.points, root / SCAN_DIR / f"{bundle.frame_id}.bin")
    if bundle.labels is not None:
        write_predictions(bundle.labels, root / LABEL_DIR / f"{bundle.frame_id}.label")
    write_ppm(bundle.image, root / IMAGE_DIR / f"{bundle.frame_id}.ppm")
    if bundle.image_labels is not None:
        write_pgm(bundle.image_labels, root / IMAGE_LABEL_DIR / f"{bundle.frame_id}.pgm")
    write_calib(bundle.camera, root / CALIB_FILE)


# Synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Seeded scene recipe: object counts per class, sensor and camera rig."""

    seed: int = 0
    frames: int = 4
    walls: int = 2
    boxes: int = 2
    cylinders: int = 2
    crates: tuple[int, int] = (3, 3)
    palette: tuple[tuple[float, float, float], ...] = SYNTHETIC_PALETTE
    ambiguous_pair: tuple[int, int] = SYNTHETIC_AMBIGUOUS_PAIR
    sensor: SensorConfig = field(default_factory=lambda: SensorConfig(height=32, width=256))
    sensor_height: float = 1.73
    max_range: float = 50.0
    image_size: tuple[int, int] = (96, 192)
    focal: float = 96.0
    camera_offset: tuple[float, float, float] = (0.27, 0.0, -0.08)
    color_noise: float = 0.02
    remission_noise: float = 0.02

    def __post_init__(self) -> None:
        """Validate counts and the palette."""
        counts = (self.frames, self.walls, self.boxes, self.cylinders, *self.crates)
        if min(counts) < 0 or self.frames < 1:
            msg = f"Object counts must be non-negative and frames positive, got {counts}"
            raise PyFuValueError(msg)
        if len(self.palette) != len(SYNTHETIC_CLASSES):
            msg = f"Palette needs {len(SYNTHETIC_CLASSES)} colors, got {len(self.palette)}"
            raise PyFuValueError(msg)
        first, second = self.ambiguous_pair
        if self.palette[first] == self.palette[second]:
            msg = "The ambiguous pair must differ in color"
            raise PyFuValueError(msg)

    @property
    def camera(self) -> CameraModel:
        """Return the pinhole camera looking along the lidar's x axis."""
        rotation = np.array(LIDAR_TO_CAMERA)
        height, width = self.image_size
        return CameraModel(
            fx=self.focal,
            fy=self.focal,
            cx=width / 2.0,
            cy=height / 2.0,
            rotation=rotation,
            translation=-rotation @ np.array(self.camera_offset),
            image_size=self.image_size,
        )


@dataclass
class _Scene:
    box_low: np.ndarray
    box_high: np.ndarray
    box_labels: np.ndarray
    cylinder_centers: np.ndarray
    cylinder_radii: np.ndarray
    cylinder_tops: np.ndarray
    cylinder_labels: np.ndarray
    ground: float


def _annulus(rng: np.random.Generator, near: float, far: float, *, front: bool) -> tuple[float, float]:
    distance = rng.uniform(near, far)
    # Front objects stay within the camera's horizontal field of view.
    angle = rng.uniform(-0.6, 0.6) if front else rng.uniform(-np.pi, np.pi)
    return distance * np.cos(angle), distance * np.sin(angle)


def _sample_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> _Scene:
    ground = -spec.sensor_height
    lows, highs, box_labels = [], [], []

    def _box(center: tuple[float, float], size: tuple[float, float, float], label: int) -> None:
        lows.append((center[0] - size[0] / 2, center[1] - size[1] / 2, ground))
        highs.append((center[0] + size[0] / 2, center[1] + size[1] / 2, ground + size[2]))
        box_labels.append(label)

    for _ in range(spec.walls):
        distance = rng.uniform(18.0, 25.0)
        along = rng.uniform(-10.0, 10.0)
        length = rng.uniform(8.0, 20.0)
        height = rng.uniform(2.5, 4.0)
        axis = rng.integers(4)
        sign = 1.0 if axis % 2 == 0 else -1.0
        if axis < 2:  # noqa: PLR2004
            _box((sign * distance, along), (0.4, length, height), CLASS_WALL)
        else:
            _box((along, sign * distance), (length, 0.4, height), CLASS_WALL)
    for _ in range(spec.boxes):
        size = (rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(1.0, 2.5))
        _box(_annulus(rng, 5.0, 16.0, front=bool(rng.integers(2))), size, CLASS_BOX)

    crate_labels = [spec.ambiguous_pair[0]] * spec.crates[0] + [spec.ambiguous_pair[1]] * spec.crates[1]
    for label in crate_labels:
        # Both crate classes share one geometry distribution.
        side = rng.uniform(0.6, 1.0)
        _box(_annulus(rng, 4.0, 14.0, front=True), (side, side, side), label)

    centers, radii, tops = [], [], []
    for _ in range(spec.cylinders):
        centers.append(_annulus(rng, 4.0, 16.0, front=bool(rng.integers(2))))
        radii.append(rng.uniform(0.3, 0.6))
        tops.append(ground + rng.uniform(1.5, 3.0))
    return _Scene(
        box_low=np.array(lows, dtype=np.float64).reshape(-1, 3),
        box_high=np.array(highs, dtype=np.float64).reshape(-1, 3),
        box_labels=np.array(box_labels, dtype=np.int64),
        cylinder_centers=np.array(centers, dtype=np.float64).reshape(-1, 2),
        cylinder_radii=np.array(radii, dtype=np.float64),
        cylinder_tops=np.array(tops, dtype=np.float64),
        cylinder_labels=np.full(len(radii), CLASS_CYLINDER, dtype=np.int64),
        ground=ground,
    )


def _hit_boxes(origin: np.ndarray, directions: np.ndarray, scene: _Scene) -> np.ndarray:
    safe = np.where(np.abs(directions) < RAY_EPSILON, RAY_EPSILON, directions)
    inverse = 1.0 / safe
    first = (scene.box_low[None] - origin) * inverse[:, None]
    second = (scene.box_high[None] - origin) * inverse[:, None]
    enter = np.minimum(first, second).max(axis=2)
    leave = np.maximum(first, second).min(axis=2)
    hit = (leave >= enter) & (enter > RAY_EPSILON)
    return np.where(hit, enter, np.inf)


def _hit_cylinders(origin: np.ndarray, directions: np.ndarray, scene: _Scene) -> np.ndarray:
    offset = origin[None, :2] - scene.cylinder_centers
    dxy = directions[:, None, :2]
    a = np.maximum((dxy**2).sum(axis=2), RAY_EPSILON)
    b = 2.0 * (dxy * offset[None]).sum(axis=2)
    c = (offset**2).sum(axis=1)[None] - scene.cylinder_radii[None] ** 2
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore"):
        side = (-b - np.sqrt(disc)) / (2.0 * a)
    z = origin[2] + side * directions[:, 2:3]
    side_hit = (disc >= 0) & (side > RAY_EPSILON) & (z >= scene.ground) & (z <= scene.cylinder_tops[None])
    with np.errstate(divide="ignore", invalid="ignore"):
        cap = (scene.cylinder_tops[None] - origin[2]) / directions[:, 2:3]
        cap_xy = origin[None, None, :2] + cap[..., None] * dxy - scene.cylinder_centers[None]
        cap_hit = (cap > RAY_EPSILON) & ((cap_xy**2).sum(axis=2) <= scene.cylinder_radii[None] ** 2)
    return np.minimum(np.where(side_hit, side, np.inf), np.where(cap_hit, cap, np.inf))


def _cast(origin: np.ndarray, directions: np.ndarray, scene: _Scene, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Return the first-hit distance (inf on a miss) and class of every ray."""
    with np.errstate(divide="ignore"):
        ground = np.where(directions[:, 2] < 0, (scene.ground - origin[2]) / directions[:, 2], np.inf)
    candidates = np.concatenate(
        [ground[:, None], _hit_boxes(origin, directions, scene), _hit_cylinders(origin, directions, scene)],
        axis=1,
    )
    labels = np.concatenate([[CLASS_GROUND], scene.box_labels, scene.cylinder_labels])
    nearest = candidates.argmin(axis=1)
    distance = candidates[np.arange(len(directions)), nearest]
    distance = np.where(distance <= max_range, distance, np.inf)
    return distance, labels[nearest]


def beam_directions(sensor: SensorConfig) -> np.ndarray:
    """Return unit ray directions through every range-view pixel centre, row-major."""
    rows, columns = np.meshgrid(np.arange(sensor.height), np.arange(sensor.width), indexing="ij")
    fov_up = np.radians(sensor.fov_up)
    fov_down = np.radians(sensor.fov_down)
    pitch = fov_up - (rows.reshape(-1) + 0.5) / sensor.height * (fov_up - fov_down)
    yaw = np.pi * (1.0 - 2.0 * (columns.reshape(-1) + 0.5) / sensor.width)
    return np.stack([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], axis=1)


def _render_camera(
    spec: SyntheticSceneSpec,
    scene: _Scene,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    camera = spec.camera
    height, width = camera.image_size
    rows, columns = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rays = np.stack(
        [
            (columns.reshape(-1) + 0.5 - camera.cx) / camera.fx,
            (rows.reshape(-1) + 0.5 - camera.cy) / camera.fy,
            np.ones(height * width),
        ],
        axis=1,
    )
    directions = rays @ camera.rotation
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    distance, labels = _cast(np.array(spec.camera_offset), directions, scene, spec.max_range)
    hit = np.isfinite(distance)
    colors = np.asarray(spec.palette, dtype=np.float64)
    image = np.where(hit[:, None], colors[labels], np.asarray(SKY_COLOR))
    image = image + rng.normal(0.0, spec.color_noise, image.shape)
    image_labels = np.where(hit, labels, IGNORE_LABEL)
    return (
        np.clip(image, 0.0, 1.0).reshape(height, width, 3).astype(np.float32),
        image_labels.reshape(height, width),
    )


def gen_synthetic(spec: SyntheticSceneSpec) -> list[FrameBundle]:
    """Ray-cast seeded scenes into labelled lidar scans and rendered camera images."""
    rng = np.random.default_rng(spec.seed)
    directions = beam_directions(spec.sensor)
    remission = np.asarray(SYNTHETIC_REMISSION)
    bundles = []
    for frame in range(spec.frames):
        scene = _sample_scene(spec, rng)
        distance, labels = _cast(np.zeros(3), directions, scene, spec.max_range)
        hit = np.isfinite(distance)
        xyz = directions[hit] * distance[hit, None]
        intensity = np.clip(remission[labels[hit]] + rng.normal(0.0, spec.remission_noise, hit.sum()), 0.0, 1.0)
        points = np.concatenate([xyz, intensity[:, None]], axis=1)
        image, image_labels = _render_camera(spec, scene, rng)
        bundles.append(
            FrameBundle(
                frame_id=f"{frame:06d}",
                cloud=PointCloud(points, labels[hit]),
                image=image,
                camera=spec.camera,
                image_labels=image_labels,
            )
        )
        LOGGER.debug("Synthetic frame %s: %s points", frame, int(hit.sum()))
    LOGGER.info("Synthesized %s frames (seed %s)", spec.frames, spec.seed)
    return bundles


def write_dataset(root: Path, bundles: Sequence[FrameBundle]) -> None:
    """Write every bundle under `root`."""
    for bundle in bundles:
        write_frame(root, bundle)
    LOGGER.info("Wrote %s frames to %s", len(bundles), root)


__all__ = [
    "SyntheticSceneSpec",
    "camera_from_calib",
    "gen_synthetic",
    "list_frames",
    "load_frame",
    "load_frames",
    "load_label_map",
    "read_labels",
    "read_pgm",
    "read_ppm",
    "render_labels",
    "write_calib",
    "write_dataset",
    "write_frame",
    "write_pgm",
    "write_ppm",
    "write_predictions",
]
