"""Run configuration: TOML file, schema validation and command-line overrides."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import voluptuous as vol
from slugify import slugify

from .const import LOGGER, PRESET_PFB_PFH, PRESETS
from .data import SensorConfig
from .dataio import SyntheticSceneSpec
from .errors import PyFuConfigError, PyFuError
from .network import PyFuConfig
from .postprocess import KnnConfig
from .traineval import OPTIMIZER_ADAM, OPTIMIZER_SGD, TARGET_CAMERA, TARGET_NETWORK, TrainConfig

LOG_LEVELS = ("debug", "info", "warning", "error", "critical")


def _pair(kind: type) -> vol.All:
    return vol.All([vol.Coerce(kind)], vol.Length(min=2, max=2), tuple)


def _sequence(kind: type, length: int) -> vol.All:
    return vol.All([vol.Coerce(kind)], vol.Length(min=length, max=length), tuple)


POSITIVE_INT = vol.All(int, vol.Range(min=1))
NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0))

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("num_classes"): vol.All(int, vol.Range(min=2)),
        vol.Optional("channels"): POSITIVE_INT,
        vol.Optional("lidar_stem"): POSITIVE_INT,
        vol.Optional("lidar_widths"): _sequence(int, len(PyFuConfig.lidar_widths)),
        vol.Optional("camera_stem"): POSITIVE_INT,
        vol.Optional("camera_widths"): _sequence(int, len(PyFuConfig.camera_widths)),
        vol.Optional("expansion"): POSITIVE_INT,
        vol.Optional("bottleneck_ratio"): POSITIVE_INT,
        vol.Optional("dpc_dilations"): vol.All([_pair(int)], vol.Length(min=1), tuple),
        vol.Optional("strategy"): str,
        vol.Optional("pyramid_fusion"): bool,
        vol.Optional("fusion_head"): bool,
        vol.Optional("late_fusion"): bool,
        vol.Optional("late_fusion_order"): str,
        vol.Optional("pyramid_combine"): str,
        vol.Optional("pyramid_top_down"): bool,
        vol.Optional("pyramid_bottom_up"): bool,
        vol.Optional("fusion_octave"): vol.All(int, vol.Range(min=0)),
        vol.Optional("freeze_lidar"): bool,
        vol.Optional("freeze_camera"): bool,
        vol.Optional("camera_downsample"): bool,
        vol.Optional("range_means"): _sequence(float, len(PyFuConfig.range_means)),
        vol.Optional("range_stds"): _sequence(float, len(PyFuConfig.range_stds)),
    }
)

SENSOR_SCHEMA = vol.Schema(
    {
        vol.Optional("height"): POSITIVE_INT,
        vol.Optional("width"): POSITIVE_INT,
        vol.Optional("fov_up"): vol.Coerce(float),
        vol.Optional("fov_down"): vol.Coerce(float),
    }
)

TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional("base_lr"): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
        vol.Optional("steps"): POSITIVE_INT,
        vol.Optional("power"): NON_NEGATIVE_FLOAT,
        vol.Optional("weight_decay"): NON_NEGATIVE_FLOAT,
        vol.Optional("momentum"): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
        vol.Optional("optimizer"): vol.In((OPTIMIZER_SGD, OPTIMIZER_ADAM)),
        vol.Optional("grad_clip"): NON_NEGATIVE_FLOAT,
        vol.Optional("batch_size"): POSITIVE_INT,
        vol.Optional("flip_probability"): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
        vol.Optional("crop_size"): _pair(int),
        vol.Optional("eval_every"): vol.All(int, vol.Range(min=0)),
        vol.Optional("target"): vol.In((TARGET_NETWORK, TARGET_CAMERA)),
    }
)

KNN_SCHEMA = vol.Schema(
    {
        vol.Optional("window"): POSITIVE_INT,
        vol.Optional("k"): POSITIVE_INT,
        vol.Optional("cutoff"): NON_NEGATIVE_FLOAT,
        vol.Optional("sigma"): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
        vol.Optional("weighted"): bool,
    }
)

SYNTH_SCHEMA = vol.Schema(
    {
        vol.Optional("frames"): POSITIVE_INT,
        vol.Optional("walls"): vol.All(int, vol.Range(min=0)),
        vol.Optional("boxes"): vol.All(int, vol.Range(min=0)),
        vol.Optional("cylinders"): vol.All(int, vol.Range(min=0)),
        vol.Optional("crates"): _pair(int),
        vol.Optional("image_size"): _pair(int),
        vol.Optional("focal"): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
    }
)

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional("root", default="data/synthetic"): str,
        vol.Optional("val_root"): str,
        vol.Optional("label_map"): str,
        vol.Optional("frames"): POSITIVE_INT,
        vol.Optional("val_frames"): POSITIVE_INT,
        vol.Optional("output", default="runs"): str,
        vol.Optional("lidar_checkpoint"): str,
        vol.Optional("camera_checkpoint"): str,
    }
)

LOGGING_SCHEMA = vol.Schema(
    {
        vol.Optional("default", default="info"): vol.All(vol.Lower, vol.In(LOG_LEVELS)),
        vol.Optional("logs", default=dict): {str: vol.All(vol.Lower, vol.In(LOG_LEVELS))},
    }
)

RUN_SCHEMA = vol.Schema(
    {
        vol.Optional("seed", default=0): vol.All(int, vol.Range(min=0)),
        vol.Optional("preset", default=PRESET_PFB_PFH): vol.In(PRESETS),
        vol.Optional("threads", default=1): POSITIVE_INT,
        vol.Optional("model", default=dict): MODEL_SCHEMA,
        vol.Optional("sensor", default=dict): SENSOR_SCHEMA,
        vol.Optional("train", default=dict): TRAIN_SCHEMA,
        vol.Optional("knn", default=dict): KNN_SCHEMA,
        vol.Optional("synth", default=dict): SYNTH_SCHEMA,
        vol.Optional("data", default=dict): DATA_SCHEMA,
        vol.Optional("logging", default=dict): LOGGING_SCHEMA,
    }
)


@dataclass(frozen=True)
class DataConfig:
    """Dataset locations and frame limits."""

    root: Path = Path("data/synthetic")
    val_root: Path | None = None
    label_map: Path | None = None
    frames: int | None = None
    val_frames: int | None = None
    output: Path = Path("runs")
    lidar_checkpoint: Path | None = None
    camera_checkpoint: Path | None = None


@dataclass(frozen=True)
class LoggingConfig:
    """Default log level plus per-logger levels."""

    default: str = "info"
    logs: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs; randomness flows from `seed` alone."""

    seed: int = 0
    preset: str = PRESET_PFB_PFH
    threads: int = 1
    model: PyFuConfig = field(default_factory=PyFuConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    synth: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @property
    def run_name(self) -> str:
        """Return the artifact name for this preset and seed."""
        return run_name(self.preset, self.seed, self.train.target)

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        preset: str | None = None,
        steps: int | None = None,
        threads: int | None = None,
    ) -> RunConfig:
        """Apply command-line flags on top of the file values."""
        if preset is not None and preset not in PRESETS:
            msg = f"Unknown preset {preset!r}; expected one of {PRESETS}"
            raise PyFuConfigError(msg)
        if seed is not None and seed < 0:
            msg = f"Seed must be non-negative, got {seed}"
            raise PyFuConfigError(msg)
        if threads is not None and threads < 1:
            msg = f"Threads must be at least 1, got {threads}"
            raise PyFuConfigError(msg)
        seed = self.seed if seed is None else seed
        preset = self.preset if preset is None else preset
        try:
            train = replace(self.train, seed=seed, steps=self.train.steps if steps is None else steps)
        except PyFuError as exception:
            raise PyFuConfigError(str(exception)) from exception
        return replace(
            self,
            seed=seed,
            preset=preset,
            threads=self.threads if threads is None else threads,
            model=self.model.with_preset(preset),
            train=train,
            synth=replace(self.synth, seed=seed),
        )


def run_name(preset: str, seed: int, target: str = TARGET_NETWORK) -> str:
    """Slugify a run's identity into a file-system friendly name."""
    stage = preset if target == TARGET_NETWORK else target
    return slugify(f"{stage} seed {seed}")


def _optional_path(value: str | None) -> Path | None:
    return None if value is None else Path(value)


def build_run_config(raw: dict[str, Any]) -> RunConfig:
    """Validate a parsed TOML document and build the frozen configuration."""
    try:
        values = RUN_SCHEMA(raw)
    except vol.Invalid as exception:
        msg = f"Invalid configuration: {exception}"
        raise PyFuConfigError(msg) from exception

    sensor_values = values["sensor"]
    synth_values = values["synth"]
    data_values = values["data"]
    try:
        sensor = SensorConfig(**sensor_values)
        config = RunConfig(
            seed=values["seed"],
            preset=values["preset"],
            threads=values["threads"],
            model=PyFuConfig(**values["model"]).with_preset(values["preset"]),
            sensor=sensor,
            train=TrainConfig(**values["train"], seed=values["seed"]),
            knn=KnnConfig(**values["knn"]),
            synth=SyntheticSceneSpec(**synth_values, sensor=sensor, seed=values["seed"]),
            data=DataConfig(
                root=Path(data_values["root"]),
                val_root=_optional_path(data_values.get("val_root")),
                label_map=_optional_path(data_values.get("label_map")),
                frames=data_values.get("frames"),
                val_frames=data_values.get("val_frames"),
                output=Path(data_values["output"]),
                lidar_checkpoint=_optional_path(data_values.get("lidar_checkpoint")),
                camera_checkpoint=_optional_path(data_values.get("camera_checkpoint")),
            ),
            logging=LoggingConfig(**values["logging"]),
        )
    except PyFuConfigError:
        raise
    except PyFuError as exception:
        msg = f"Invalid configuration: {exception}"
        raise PyFuConfigError(msg) from exception
    LOGGER.debug("Run configuration: %s", config)
    return config


def load_run_config(path: Path | None) -> RunConfig:
    """Read a TOML configuration file; no file means every documented default."""
    if path is None:
        return build_run_config({})
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except OSError as exception:
        msg = f"Cannot read configuration {path}: {exception}"
        raise PyFuConfigError(msg) from exception
    except tomllib.TOMLDecodeError as exception:
        msg = f"Configuration {path} is not valid TOML: {exception}"
        raise PyFuConfigError(msg) from exception
    return build_run_config(raw)
