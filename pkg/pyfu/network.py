"""Lidar and camera backbones, fusion modules, pyramid fusion backbone and head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .blocks import (
    Conv2d,
    ConvNormAct,
    InvertedResidual,
    SemanticHead,
    TwoWayFPN,
    TwoWayPyramid,
    resize_to,
    spatial_size,
    strategy_blocks,
)
from .camproj import (
    build_mapping,
    camera_coordinates,
    crop_mapping,
    gather_camera_features,
    scale_mapping,
)
from .const import (
    CAMERA_DIVISOR,
    CAMERA_STAGE_COUNT,
    COMBINE_CONCAT,
    COMBINE_SUM,
    DEFAULT_BOTTLENECK_RATIO,
    DEFAULT_CHANNELS,
    DEFAULT_DPC_DILATIONS,
    DEFAULT_EXPANSION,
    FUSION_STRATEGIES,
    IMAGE_MEAN,
    IMAGE_STD,
    LATE_FUSION_CAMERA_FIRST,
    LATE_FUSION_LIDAR_FIRST,
    LIDAR_DECODER_STRIDE,
    LIDAR_STAGE_STRIDES,
    LIDAR_TAP_STAGES,
    LIDAR_TAP_STRIDES,
    LOGGER,
    PRESET_BASELINE,
    PRESET_LATE_FUSION,
    PRESET_PFB,
    PRESET_PFB_PFH,
    RANGE_CHANNEL_MEANS,
    RANGE_CHANNEL_STDS,
    STRATEGY_BOTTLENECK,
    SYNTHETIC_CLASSES,
)
from .errors import PyFuConfigError, PyFuShapeError
from .numcore import Module, Tensor, concat, default_dtype, no_grad, softmax
from .rangeview import RANGE_CHANNELS, crop_to_overlap, normalize_channels, overlap_window, project_cloud

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .data import CamRVMapping, FrameBundle, ProjectionIndex, RangeImage, SensorConfig

Pair = tuple[int, int]
Interval = tuple[int, int]
LIDAR_DIVISOR = (8, 32)
IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class PyFuConfig:
    """Architecture of the fusion network and its ablation switches."""

    num_classes: int = len(SYNTHETIC_CLASSES)
    channels: int = DEFAULT_CHANNELS
    lidar_stem: int = 16
    lidar_widths: tuple[int, ...] = (16, 24, 32, 48, 64, 96)
    camera_stem: int = 16
    camera_widths: tuple[int, ...] = (24, 32, 48, 64)
    expansion: int = DEFAULT_EXPANSION
    bottleneck_ratio: int = DEFAULT_BOTTLENECK_RATIO
    dpc_dilations: tuple[Pair, ...] = DEFAULT_DPC_DILATIONS
    strategy: str = STRATEGY_BOTTLENECK
    pyramid_fusion: bool = True
    fusion_head: bool = True
    late_fusion: bool = False
    late_fusion_order: str = LATE_FUSION_CAMERA_FIRST
    pyramid_combine: str = COMBINE_SUM
    pyramid_top_down: bool = True
    pyramid_bottom_up: bool = True
    fusion_octave: int = 1
    freeze_lidar: bool = True
    freeze_camera: bool = True
    camera_downsample: bool = False
    range_means: tuple[float, ...] = RANGE_CHANNEL_MEANS
    range_stds: tuple[float, ...] = RANGE_CHANNEL_STDS

    def __post_init__(self) -> None:
        """Reject inconsistent architectures."""
        if self.num_classes < 2:  # noqa: PLR2004
            msg = f"At least two classes are required, got {self.num_classes}"
            raise PyFuConfigError(msg)
        if len(self.lidar_widths) != len(LIDAR_STAGE_STRIDES):
            msg = f"lidar_widths needs {len(LIDAR_STAGE_STRIDES)} entries, got {len(self.lidar_widths)}"
            raise PyFuConfigError(msg)
        if len(self.camera_widths) != CAMERA_STAGE_COUNT:
            msg = f"camera_widths needs {CAMERA_STAGE_COUNT} entries, got {len(self.camera_widths)}"
            raise PyFuConfigError(msg)
        widths = (self.channels, self.lidar_stem, self.camera_stem, *self.lidar_widths, *self.camera_widths)
        if min(widths) < 1:
            msg = f"Channel widths must be at least 1, got {widths}"
            raise PyFuConfigError(msg)
        if self.strategy not in FUSION_STRATEGIES:
            msg = f"Unknown fusion strategy {self.strategy!r}; expected one of {FUSION_STRATEGIES}"
            raise PyFuConfigError(msg)
        if self.late_fusion_order not in (LATE_FUSION_CAMERA_FIRST, LATE_FUSION_LIDAR_FIRST):
            msg = f"Unknown late fusion order {self.late_fusion_order!r}"
            raise PyFuConfigError(msg)
        if self.pyramid_combine not in (COMBINE_SUM, COMBINE_CONCAT):
            msg = f"Unknown pyramid combination {self.pyramid_combine!r}"
            raise PyFuConfigError(msg)
        if self.fusion_head and not self.pyramid_fusion:
            msg = "The pyramid fusion head requires the pyramid fusion backbone"
            raise PyFuConfigError(msg)
        if self.fusion_head and self.late_fusion:
            msg = "The pyramid fusion head already performs late fusion; disable late_fusion"
            raise PyFuConfigError(msg)
        if self.fusion_octave < 0:
            msg = f"fusion_octave must be non-negative, got {self.fusion_octave}"
            raise PyFuConfigError(msg)
        if len(self.range_means) != RANGE_CHANNELS or len(self.range_stds) != RANGE_CHANNELS:
            msg = f"Range normalization needs {RANGE_CHANNELS} means and standard deviations"
            raise PyFuConfigError(msg)

    @property
    def uses_camera(self) -> bool:
        """Return True when any fusion module is configured."""
        return self.pyramid_fusion or self.late_fusion

    @property
    def fusion_module_count(self) -> int:
        """Return the number of fusion modules the configuration builds."""
        return 3 * self.pyramid_fusion + 2 * self.fusion_head + int(self.late_fusion)

    def with_preset(self, preset: str) -> PyFuConfig:
        """Return a copy switched to one of the ablation presets."""
        flags = {
            PRESET_BASELINE: (False, False, False),
            PRESET_LATE_FUSION: (False, False, True),
            PRESET_PFB: (True, False, False),
            PRESET_PFB_PFH: (True, True, False),
        }
        if preset not in flags:
            msg = f"Unknown preset {preset!r}; expected one of {tuple(flags)}"
            raise PyFuConfigError(msg)
        pyramid, head, late = flags[preset]
        return replace(self, pyramid_fusion=pyramid, fusion_head=head, late_fusion=late)


@dataclass
class BackboneOutputs:
    """Three pyramid features (fine to coarse) plus decoder features."""

    taps: list[Tensor]
    decoder: Tensor
    tap_strides: list[Pair] = field(default_factory=list)
    decoder_stride: Pair = (1, 1)


@dataclass
class NetworkOutput:
    """Class logits placed at rows x columns of the full-resolution range view."""

    logits: Tensor
    rows: Interval
    columns: Interval
    fused: bool

    @property
    def probabilities(self) -> Tensor:
        """Return the per-pixel class distribution."""
        return softmax(self.logits, axis=1)


def range_tensor(range_image: RangeImage, config: PyFuConfig) -> Tensor:
    """Normalize a range image into a (1, 5, H, W) network input."""
    normalized = normalize_channels(range_image, config.range_means, config.range_stds)
    return Tensor(normalized[None].astype(default_dtype()))


def image_tensor(image: np.ndarray) -> Tensor:
    """Convert an HxWx3 image in [0, 1] into a normalized (1, 3, H, W) input."""
    chw = (np.asarray(image, dtype=np.float32).transpose(2, 0, 1) - IMAGE_MEAN) / IMAGE_STD
    return Tensor(chw[None].astype(default_dtype()))


def _fusion_stride(stride: Pair, octave: int) -> Pair:
    factor = 2**octave
    return max(1, stride[0] // factor), max(1, stride[1] // factor)


class LidarBackbone(Module):
    """Range-view encoder with horizontal-only early downsampling, two-way FPN and semantic head."""

    def __init__(self, config: PyFuConfig, rng: np.random.Generator) -> None:
        """Build stem, six inverted-residual stages, FPN, head and classifier."""
        self.stem = ConvNormAct(RANGE_CHANNELS, config.lidar_stem, 3, rng)
        widths = (config.lidar_stem, *config.lidar_widths)
        self.stages = [
            InvertedResidual(widths[i], widths[i + 1], rng, stride=stride, expansion=config.expansion)
            for i, stride in enumerate(LIDAR_STAGE_STRIDES)
        ]
        self.fpn = TwoWayFPN(
            [config.lidar_widths[stage] for stage in LIDAR_TAP_STAGES],
            config.channels,
            rng,
            combine=config.pyramid_combine,
        )
        self.head = SemanticHead(config.channels, rng, dilations=config.dpc_dilations)
        self.classifier = Conv2d(config.channels, config.num_classes, 1, rng, bias=True)

    def forward(self, x: Tensor) -> BackboneOutputs:
        """Return FPN taps at strides (2,8), (4,16), (8,32) and decoder features at (2,8)."""
        height, width = spatial_size(x)
        if x.shape[1] != RANGE_CHANNELS:
            msg = f"Range input needs {RANGE_CHANNELS} channels, got {x.shape}"
            raise PyFuShapeError(msg)
        if height % LIDAR_DIVISOR[0] or width % LIDAR_DIVISOR[1]:
            msg = (
                f"Range view {height}x{width} must have height divisible by {LIDAR_DIVISOR[0]} "
                f"and width divisible by {LIDAR_DIVISOR[1]}"
            )
            raise PyFuShapeError(msg)
        out = self.stem(x)
        taps = []
        for position, stage in enumerate(self.stages):
            out = stage(out)
            if position in LIDAR_TAP_STAGES:
                taps.append(out)
        pyramid = self.fpn(taps)
        LOGGER.debug("Lidar taps: %s", [tap.shape for tap in pyramid])
        return BackboneOutputs(
            taps=pyramid,
            decoder=self.head(pyramid),
            tap_strides=list(LIDAR_TAP_STRIDES),
            decoder_stride=LIDAR_DECODER_STRIDE,
        )

    def classify(self, decoder: Tensor, size: Pair) -> Tensor:
        """Return class logits resized to the full range view."""
        return resize_to(self.classifier(decoder), size)


class CameraBackbone(Module):
    """Strided image encoder exposing taps at 1/8, 1/16, 1/32 and decoder features at 1/4."""

    def __init__(self, config: PyFuConfig, rng: np.random.Generator) -> None:
        """Build stem, four stages, FPN, head, 1/4 lateral and classifier."""
        self.downsample = config.camera_downsample
        self.stem = ConvNormAct(IMAGE_CHANNELS, config.camera_stem, 3, rng, stride=2)
        widths = (config.camera_stem, *config.camera_widths)
        self.stages = [
            InvertedResidual(widths[i], widths[i + 1], rng, stride=2, expansion=config.expansion)
            for i in range(CAMERA_STAGE_COUNT)
        ]
        self.fpn = TwoWayFPN(config.camera_widths[1:], config.channels, rng, combine=config.pyramid_combine)
        self.head = SemanticHead(config.channels, rng, dilations=config.dpc_dilations)
        self.lateral = ConvNormAct(config.camera_widths[0], config.channels, 1, rng)
        self.classifier = Conv2d(config.channels, config.num_classes, 1, rng, bias=True)

    def forward(self, image: Tensor) -> BackboneOutputs:
        """Encode a normalized (1, 3, Hc, Wc) image."""
        height, width = spatial_size(image)
        divisor = CAMERA_DIVISOR * (2 if self.downsample else 1)
        if height % divisor or width % divisor:
            msg = f"Camera image {height}x{width} must have both sides divisible by {divisor}"
            raise PyFuShapeError(msg)
        if self.downsample:
            image = resize_to(image, (height // 2, width // 2))
        out = self.stem(image)
        features = []
        for stage in self.stages:
            out = stage(out)
            features.append(out)
        pyramid = self.fpn(features[1:])
        head = self.head(pyramid)
        quarter = self.lateral(features[0])
        decoder = resize_to(head, spatial_size(quarter)) + quarter
        LOGGER.debug("Camera taps: %s decoder %s", [tap.shape for tap in pyramid], decoder.shape)
        return BackboneOutputs(taps=pyramid, decoder=decoder)

    def classify(self, decoder: Tensor, size: Pair) -> Tensor:
        """Return per-pixel image logits at the input resolution."""
        return resize_to(self.classifier(decoder), size)


class FusionModule(Module):
    """Crop to overlap, bring the second input into range-view space, upsample lidar, concat, fuse."""

    def __init__(  # noqa: PLR0913
        self,
        lidar_channels: int,
        other_channels: int,
        config: PyFuConfig,
        rng: np.random.Generator,
        *,
        camera: bool = True,
    ) -> None:
        """Build the alignment block (camera inputs only) and the strategy blocks."""
        self.camera = camera
        self.align = (
            InvertedResidual(other_channels + 1, config.channels, rng, expansion=config.expansion)
            if camera
            else None
        )
        aligned = config.channels if camera else other_channels
        self.blocks = strategy_blocks(
            config.strategy,
            lidar_channels + aligned,
            config.channels,
            rng,
            expansion=config.expansion,
            ratio=config.bottleneck_ratio,
        )

    def forward(  # noqa: PLR0913
        self,
        lidar: Tensor,
        other: Tensor,
        mapping: CamRVMapping,
        *,
        target_stride: Pair,
        lidar_stride: Pair | None,
        other_stride: Pair | None = None,
    ) -> Tensor:
        """
        Fuse at the overlap window of `target_stride`.

        `mapping` is the full-resolution camera mapping. A stride of None
        means the input is already cropped to the overlap.
        """
        rows, columns = overlap_window(mapping.columns, mapping.rows, target_stride)
        target = (rows[1] - rows[0], columns[1] - columns[0])
        if lidar_stride is not None:
            lidar = crop_to_overlap(lidar, mapping.columns, mapping.rows, lidar_stride)
        lidar = resize_to(lidar, target)

        if self.camera:
            scaled = crop_mapping(scale_mapping(mapping, target_stride, spatial_size(other)))
            transformed = self.align(gather_camera_features(other, scaled))
        else:
            if other_stride is not None:
                other = crop_to_overlap(other, mapping.columns, mapping.rows, other_stride)
            transformed = resize_to(other, target)

        out = concat([lidar, transformed], axis=1)
        for block in self.blocks:
            out = block(out)
        return out


class PyramidFusionBackbone(Module):
    """Fusion at three scales aggregated by parallel top-down and bottom-up paths."""

    def __init__(self, config: PyFuConfig, camera_channels: int, rng: np.random.Generator) -> None:
        """Build three fusion modules and the two-way pyramid."""
        self.octave = config.fusion_octave
        self.fusions = [
            FusionModule(config.channels, camera_channels, config, rng) for _ in LIDAR_TAP_STRIDES
        ]
        self.pyramid = TwoWayPyramid(
            config.channels,
            len(self.fusions),
            rng,
            combine=config.pyramid_combine,
            top_down=config.pyramid_top_down,
            bottom_up=config.pyramid_bottom_up,
        )

    def target_strides(self, lidar_strides: Sequence[Pair]) -> list[Pair]:
        """Return the fusion strides, `octave` octaves finer than the lidar taps."""
        return [_fusion_stride(stride, self.octave) for stride in lidar_strides]

    def forward(
        self,
        lidar: BackboneOutputs,
        camera: BackboneOutputs,
        mapping: CamRVMapping,
    ) -> list[Tensor]:
        """Return the three aggregated pyramid outputs, fine to coarse."""
        fused = [
            fusion(lidar_tap, camera_tap, mapping, target_stride=target, lidar_stride=stride)
            for fusion, lidar_tap, camera_tap, stride, target in zip(
                self.fusions,
                lidar.taps,
                camera.taps,
                lidar.tap_strides,
                self.target_strides(lidar.tap_strides),
                strict=True,
            )
        ]
        LOGGER.debug("Pyramid fusion targets: %s", [tensor.shape for tensor in fused])
        return self.pyramid(fused)


class PyFuNetwork(Module):
    """Complete network; the configuration selects one row of the ablation lattice."""

    def __init__(self, config: PyFuConfig, rng: np.random.Generator | int = 0) -> None:
        """Build every part the configuration needs and name the parameters."""
        generator = np.random.default_rng(rng) if isinstance(rng, int) else rng
        self.config = config
        self.lidar = LidarBackbone(config, generator)
        self.camera = CameraBackbone(config, generator)
        channels = config.channels
        self.pfb = PyramidFusionBackbone(config, channels, generator) if config.pyramid_fusion else None
        self.head = (
            SemanticHead(channels, generator, dilations=config.dpc_dilations) if config.pyramid_fusion else None
        )
        late: list[FusionModule] = []
        if config.fusion_head:
            camera_late = FusionModule(channels, channels, config, generator, camera=True)
            lidar_late = FusionModule(channels, channels, config, generator, camera=False)
            late = (
                [camera_late, lidar_late]
                if config.late_fusion_order == LATE_FUSION_CAMERA_FIRST
                else [lidar_late, camera_late]
            )
        elif config.late_fusion:
            late = [FusionModule(channels, channels, config, generator, camera=True)]
        self.late = late
        self.classifier = (
            Conv2d(channels, config.num_classes, 1, generator, bias=True) if config.uses_camera else None
        )
        self.assign_names()
        self.lidar.freeze(frozen=config.freeze_lidar)
        self.camera.freeze(frozen=config.freeze_camera)
        self.train()

    def train(self, *, mode: bool = True) -> PyFuNetwork:
        """Set train/eval mode; frozen backbones always use running statistics."""
        super().train(mode=mode)
        if self.config.freeze_lidar:
            self.lidar.train(mode=False)
        if self.config.freeze_camera:
            self.camera.train(mode=False)
        return self

    def fusion_modules(self) -> list[FusionModule]:
        """Return every fusion module in the graph."""
        return [module for module in self.modules() if isinstance(module, FusionModule)]

    def graph_modules(self) -> list[Module]:
        """Return the modules a camera-fed forward of this preset runs through."""
        lidar, camera = self.lidar, self.camera
        if not self.config.uses_camera:
            return [lidar]
        modules: list[Module] = [lidar.stem, *lidar.stages, lidar.fpn, camera.stem, *camera.stages, camera.fpn]
        # the backbone heads only feed the decoder features that late fusion consumes
        if self.late or self.pfb is None:
            modules.append(lidar.head)
        if any(fusion.camera for fusion in self.late):
            modules.extend([camera.head, camera.lateral])
        if self.pfb is not None:
            modules.extend([self.pfb, self.head])
        return [*modules, *self.late, self.classifier]

    def missing_gradients(self) -> list[str]:
        """Name the unfrozen graph parameters the last backward did not reach."""
        return [
            param.name
            for module in self.graph_modules()
            for param in module.params()
            if not param.frozen and param.grad is None
        ]

    def forward(
        self,
        range_input: Tensor,
        image: Tensor | None = None,
        mapping: CamRVMapping | None = None,
    ) -> NetworkOutput:
        """Predict over the overlap crop, or over the full range view without a camera."""
        size = spatial_size(range_input)
        lidar = self.lidar(range_input)
        if not self.config.uses_camera:
            logits = self.lidar.classify(lidar.decoder, size)
            if mapping is None:
                return NetworkOutput(logits=logits, rows=(0, size[0]), columns=(0, size[1]), fused=False)
            cropped = crop_to_overlap(logits, mapping.columns, mapping.rows)
            return NetworkOutput(logits=cropped, rows=mapping.rows, columns=mapping.columns, fused=False)
        if image is None or mapping is None:
            LOGGER.warning("No camera input; falling back to the lidar-only prediction")
            logits = self.lidar.classify(lidar.decoder, size)
            return NetworkOutput(logits=logits, rows=(0, size[0]), columns=(0, size[1]), fused=False)

        camera = self.camera(image)
        decoder_stride = _fusion_stride(lidar.decoder_stride, self.config.fusion_octave)
        if self.pfb is not None:
            pyramid = self.pfb(lidar, camera, mapping)
            features = self.head(pyramid)
            feature_stride: Pair | None = None
            target_stride = self.pfb.target_strides(lidar.tap_strides)[0]
        else:
            features = lidar.decoder
            feature_stride = lidar.decoder_stride
            target_stride = decoder_stride

        for fusion in self.late:
            other = camera.decoder if fusion.camera else lidar.decoder
            features = fusion(
                features,
                other,
                mapping,
                target_stride=target_stride,
                lidar_stride=feature_stride,
                other_stride=None if fusion.camera else lidar.decoder_stride,
            )
            feature_stride = None

        overlap = (mapping.rows[1] - mapping.rows[0], mapping.columns[1] - mapping.columns[0])
        logits = resize_to(self.classifier(features), overlap)
        return NetworkOutput(logits=logits, rows=mapping.rows, columns=mapping.columns, fused=True)

    def camera_logits(self, image: Tensor) -> Tensor:
        """Run the camera backbone as a stand-alone image segmenter."""
        return self.camera.classify(self.camera(image).decoder, spatial_size(image))


@dataclass
class PointScores:
    """Per-point class probabilities; rows outside `mask` are zero."""

    probabilities: np.ndarray
    mask: np.ndarray
    index: ProjectionIndex
    range_image: RangeImage
    pixel_labels: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        """Return the per-point argmax class, -1 outside the mask."""
        return np.where(self.mask, self.probabilities.argmax(axis=1), -1)


def point_overlap_mask(
    bundle: FrameBundle,
    index: ProjectionIndex,
    rows: Interval,
    columns: Interval,
) -> np.ndarray:
    """Return points visible to the camera whose pixel lies inside the window."""
    _, visible = camera_coordinates(bundle.cloud.points, bundle.camera)
    inside = (index.v >= rows[0]) & (index.v < rows[1]) & (index.u >= columns[0]) & (index.u < columns[1])
    return visible & inside


def pyfu_forward(
    network: PyFuNetwork,
    bundle: FrameBundle,
    sensor: SensorConfig,
    *,
    use_camera: bool = True,
) -> PointScores:
    """Run the full pipeline on one frame and return per-point scores in the overlap."""
    range_image, index = project_cloud(bundle.cloud, sensor)
    mapping = build_mapping(bundle.cloud, index, bundle.camera) if use_camera else None
    with no_grad():
        output = network(
            range_tensor(range_image, network.config),
            image_tensor(bundle.image) if use_camera else None,
            mapping,
        )
        probabilities = output.probabilities.data[0]

    (r0, r1), (c0, c1) = output.rows, output.columns
    pixel_labels = np.full((range_image.height, range_image.width), -1, dtype=np.int64)
    pixel_labels[r0:r1, c0:c1] = probabilities.argmax(axis=0)
    if output.fused or mapping is not None:
        mask = point_overlap_mask(bundle, index, output.rows, output.columns)
    else:
        mask = np.ones(len(bundle.cloud), dtype=bool)

    scores = np.zeros((len(bundle.cloud), network.config.num_classes), dtype=np.float32)
    rows = index.v[mask] - r0
    columns = index.u[mask] - c0
    scores[mask] = probabilities[:, rows, columns].T
    return PointScores(
        probabilities=scores,
        mask=mask,
        index=index,
        range_image=range_image,
        pixel_labels=pixel_labels,
    )
