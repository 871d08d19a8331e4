"""Network building blocks: convolution units, residual blocks and semantic-head modules."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np

from .const import (
    COMBINE_CONCAT,
    COMBINE_SUM,
    DEFAULT_BOTTLENECK_RATIO,
    DEFAULT_DPC_DILATIONS,
    DEFAULT_EXPANSION,
    LEAKY_SLOPE,
    NORM_MOMENTUM,
    STRATEGY_BOTTLENECK,
    STRATEGY_DOUBLE_INVERTED,
    STRATEGY_INVERTED,
)
from .errors import PyFuShapeError, PyFuValueError
from .numcore import (
    ACTIVATION_IDENTITY,
    ACTIVATION_LEAKY_RELU,
    MODE_BATCH_STAT,
    MODE_FIXED_STAT,
    Module,
    Param,
    Tensor,
    add,
    bilinear_resize,
    concat,
    conv2d,
    default_dtype,
    norm_act,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

Pair = tuple[int, int]
BRANCH_RESIDUAL_BOTTLENECK = "brb"
BRANCH_RESIDUAL_BASIC = "bb"


def _pair(value: int | Sequence[int]) -> Pair:
    if isinstance(value, int):
        return value, value
    first, second = value
    return int(first), int(second)


def _check_channels(*counts: int) -> None:
    if any(count < 1 for count in counts):
        msg = f"Channel counts must be at least 1, got {counts}"
        raise PyFuValueError(msg)


def clamp_dilation(dilation: Pair, size: Pair) -> Pair:
    """Shrink a 3x3 dilation so its receptive field fits a map of `size`."""
    return (
        max(1, min(dilation[0], (size[0] - 1) // 2)),
        max(1, min(dilation[1], (size[1] - 1) // 2)),
    )


def resize_to(x: Tensor, size: Pair) -> Tensor:
    """Bilinearly resize unless the spatial size already matches."""
    return bilinear_resize(x, size[0], size[1])


def spatial_size(x: Tensor) -> Pair:
    """Return (height, width) of an NCHW tensor."""
    return int(x.shape[2]), int(x.shape[3])


class Conv2d(Module):
    """Convolution with 'same' padding at stride 1."""

    def __init__(  # noqa: PLR0913
        self,
        in_channels: int,
        out_channels: int,
        kernel: int | Pair,
        rng: np.random.Generator,
        *,
        stride: int | Pair = 1,
        dilation: int | Pair = 1,
        groups: int = 1,
        bias: bool = False,
    ) -> None:
        """Initialize He-normal weights."""
        _check_channels(in_channels, out_channels)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.dilation = _pair(dilation)
        self.groups = groups
        fan_in = (in_channels // groups) * self.kernel[0] * self.kernel[1]
        shape = (out_channels, in_channels // groups, *self.kernel)
        self.weight = Param(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))
        self.bias = Param(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor, dilation: Pair | None = None) -> Tensor:
        """Convolve, optionally overriding the dilation."""
        dy, dx = dilation or self.dilation
        padding = (dy * (self.kernel[0] - 1) // 2, dx * (self.kernel[1] - 1) // 2)
        return conv2d(
            x,
            self.weight.tensor,
            None if self.bias is None else self.bias.tensor,
            stride=self.stride,
            padding=padding,
            dilation=(dy, dx),
            groups=self.groups,
        )


class NormAct(Module):
    """Per-channel normalization + affine + activation with running statistics."""

    def __init__(self, channels: int, activation: str = ACTIVATION_LEAKY_RELU) -> None:
        """Start from unit scale, zero shift and unit running variance."""
        _check_channels(channels)
        self.activation = activation
        self.scale = Param(np.ones(channels))
        self.shift = Param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def buffers(self) -> dict[str, np.ndarray]:
        """Return running statistics."""
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        """Replace a running statistic."""
        if name not in ("running_mean", "running_var"):
            super().load_buffer(name, value)
        current = getattr(self, name)
        if value.shape != current.shape:
            msg = f"Buffer {name} expects shape {current.shape}, got {value.shape}"
            raise PyFuShapeError(msg)
        setattr(self, name, np.array(value))

    def forward(self, x: Tensor) -> Tensor:
        """Normalize with batch statistics in training mode, running ones otherwise."""
        if self.training:
            count = x.data.size // x.shape[1]
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3)) * (count / max(count - 1, 1))
            self.running_mean = ((1 - NORM_MOMENTUM) * self.running_mean + NORM_MOMENTUM * mean).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1 - NORM_MOMENTUM) * self.running_var + NORM_MOMENTUM * var).astype(
                self.running_var.dtype
            )
        return norm_act(
            x,
            self.scale.tensor,
            self.shift.tensor,
            mode=MODE_BATCH_STAT if self.training else MODE_FIXED_STAT,
            activation=self.activation,
            slope=LEAKY_SLOPE,
            running_mean=self.running_mean,
            running_var=self.running_var,
        )


class ConvNormAct(Module):
    """Convolution followed by NormAct."""

    def __init__(  # noqa: PLR0913
        self,
        in_channels: int,
        out_channels: int,
        kernel: int | Pair,
        rng: np.random.Generator,
        *,
        stride: int | Pair = 1,
        dilation: int | Pair = 1,
        groups: int = 1,
        activation: str = ACTIVATION_LEAKY_RELU,
    ) -> None:
        """Build the convolution and its normalization."""
        self.conv = Conv2d(
            in_channels, out_channels, kernel, rng, stride=stride, dilation=dilation, groups=groups
        )
        self.norm = NormAct(out_channels, activation)

    def forward(self, x: Tensor, dilation: Pair | None = None) -> Tensor:
        """Apply conv then NormAct."""
        return self.norm(self.conv(x, dilation))


class SeparableConv(Module):
    """Depthwise 3x3 and pointwise 1x1, each followed by NormAct."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        stride: int | Pair = 1,
        dilation: int | Pair = 1,
    ) -> None:
        """Build both stages."""
        self.depthwise = ConvNormAct(
            in_channels, in_channels, 3, rng, stride=stride, dilation=dilation, groups=in_channels
        )
        self.pointwise = ConvNormAct(in_channels, out_channels, 1, rng)

    def forward(self, x: Tensor, dilation: Pair | None = None) -> Tensor:
        """Apply depthwise then pointwise stage."""
        return self.pointwise(self.depthwise(x, dilation))


class InvertedResidual(Module):
    """Expand 1x1, depthwise 3x3, project 1x1; identity skip when shapes allow."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        stride: int | Pair = 1,
        expansion: int = DEFAULT_EXPANSION,
    ) -> None:
        """Build the three stages."""
        _check_channels(in_channels, out_channels, expansion)
        hidden = in_channels * expansion
        self.stride = _pair(stride)
        self.expand = ConvNormAct(in_channels, hidden, 1, rng)
        self.depthwise = ConvNormAct(hidden, hidden, 3, rng, stride=stride, groups=hidden)
        self.project = ConvNormAct(hidden, out_channels, 1, rng, activation=ACTIVATION_IDENTITY)
        self.residual = in_channels == out_channels and self.stride == (1, 1)

    def forward(self, x: Tensor) -> Tensor:
        """Run the block."""
        out = self.project(self.depthwise(self.expand(x)))
        return add(x, out) if self.residual else out


class _ShortcutResidual(Module):
    """Residual block base with a 1x1 projection shortcut when channels differ."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        _check_channels(in_channels, out_channels)
        self.shortcut = (
            None
            if in_channels == out_channels
            else ConvNormAct(in_channels, out_channels, 1, rng, activation=ACTIVATION_IDENTITY)
        )

    def branch(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        """Sum of the residual branch and the (projected) skip path."""
        skip = x if self.shortcut is None else self.shortcut(x)
        return add(skip, self.branch(x))


class BottleneckResidual(_ShortcutResidual):
    """1x1 reduce, 3x3, 1x1 expand (BRB)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        ratio: int = DEFAULT_BOTTLENECK_RATIO,
    ) -> None:
        """Build the bottleneck; the internal width is out_channels / ratio."""
        super().__init__(in_channels, out_channels, rng)
        self.width = max(1, out_channels // ratio)
        self.reduce = ConvNormAct(in_channels, self.width, 1, rng)
        self.conv = ConvNormAct(self.width, self.width, 3, rng)
        self.expand = ConvNormAct(self.width, out_channels, 1, rng, activation=ACTIVATION_IDENTITY)

    def branch(self, x: Tensor) -> Tensor:
        """Residual branch."""
        return self.expand(self.conv(self.reduce(x)))


class BasicResidual(_ShortcutResidual):
    """Two 3x3 convolutions (BB)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        """Build both convolutions."""
        super().__init__(in_channels, out_channels, rng)
        self.first = ConvNormAct(in_channels, out_channels, 3, rng)
        self.second = ConvNormAct(out_channels, out_channels, 3, rng, activation=ACTIVATION_IDENTITY)

    def branch(self, x: Tensor) -> Tensor:
        """Residual branch."""
        return self.second(self.first(x))


def residual_block(
    variant: str,
    in_channels: int,
    out_channels: int,
    rng: np.random.Generator,
    *,
    ratio: int = DEFAULT_BOTTLENECK_RATIO,
) -> _ShortcutResidual:
    """Build a BRB or BB residual block."""
    if variant == BRANCH_RESIDUAL_BOTTLENECK:
        return BottleneckResidual(in_channels, out_channels, rng, ratio=ratio)
    if variant == BRANCH_RESIDUAL_BASIC:
        return BasicResidual(in_channels, out_channels, rng)
    msg = f"Unknown residual block variant: {variant}"
    raise PyFuValueError(msg)


def strategy_blocks(
    strategy: str,
    in_channels: int,
    out_channels: int,
    rng: np.random.Generator,
    *,
    expansion: int = DEFAULT_EXPANSION,
    ratio: int = DEFAULT_BOTTLENECK_RATIO,
) -> list[Module]:
    """Return the residual blocks that follow concatenation in a fusion module."""
    if strategy == STRATEGY_BOTTLENECK:
        return [
            residual_block(BRANCH_RESIDUAL_BOTTLENECK, in_channels, out_channels, rng, ratio=ratio),
            residual_block(BRANCH_RESIDUAL_BASIC, out_channels, out_channels, rng),
        ]
    if strategy == STRATEGY_INVERTED:
        return [InvertedResidual(in_channels, out_channels, rng, expansion=expansion)]
    if strategy == STRATEGY_DOUBLE_INVERTED:
        return [
            InvertedResidual(in_channels, out_channels, rng, expansion=expansion),
            InvertedResidual(out_channels, out_channels, rng, expansion=expansion),
        ]
    msg = f"Unknown fusion strategy: {strategy}"
    raise PyFuValueError(msg)


class LSFE(Module):
    """Large-scale feature extractor: two separable 3x3 convolutions."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        """Build both convolutions."""
        self.first = SeparableConv(in_channels, out_channels, rng)
        self.second = SeparableConv(out_channels, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        """Run both convolutions."""
        return self.second(self.first(x))


class DPC(Module):
    """Dense prediction cell: parallel dilated separable branches fused by a 1x1 convolution."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        *,
        dilations: Sequence[Pair] = DEFAULT_DPC_DILATIONS,
    ) -> None:
        """Build one branch per dilation."""
        if not dilations:
            msg = "DPC needs at least one dilation"
            raise PyFuValueError(msg)
        self.dilations = [_pair(dilation) for dilation in dilations]
        self.branches = [
            SeparableConv(in_channels, out_channels, rng, dilation=dilation) for dilation in self.dilations
        ]
        self.fuse = ConvNormAct(out_channels * len(self.branches), out_channels, 1, rng)

    def effective_dilations(self, size: Pair) -> list[Pair]:
        """Return the dilations actually used on a map of `size`."""
        return [clamp_dilation(dilation, size) for dilation in self.dilations]

    def forward(self, x: Tensor) -> Tensor:
        """Run every branch at its clamped dilation and fuse."""
        dilations = self.effective_dilations(spatial_size(x))
        outputs = [branch(x, dilation) for branch, dilation in zip(self.branches, dilations, strict=True)]
        return self.fuse(concat(outputs, axis=1))


def octave_count(fine: int, coarse: int) -> int:
    """Return the rounded number of x2 steps from `coarse` to `fine`."""
    return round(math.log2(fine / coarse))


class MismatchCorrection(Module):
    """Refine a coarse map, upsample it in x2 steps to the fine size and add."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        """Build the two refinement convolutions."""
        self.first = SeparableConv(channels, channels, rng)
        self.second = SeparableConv(channels, channels, rng)

    def forward(self, fine: Tensor, coarse: Tensor) -> Tensor:
        """Return fine + upsample(refine(coarse))."""
        fine_size = spatial_size(fine)
        size = spatial_size(coarse)
        if size[0] > fine_size[0] or size[1] > fine_size[1]:
            msg = f"Mismatch correction expects a coarser map, got coarse {coarse.shape} fine {fine.shape}"
            raise PyFuShapeError(msg)
        octaves = (octave_count(fine_size[0], size[0]), octave_count(fine_size[1], size[1]))
        if abs(octaves[0] - octaves[1]) > 1:
            msg = f"Incompatible aspect between coarse {coarse.shape} and fine {fine.shape}"
            raise PyFuShapeError(msg)
        out = self.second(self.first(coarse))
        while size != fine_size:
            size = (min(2 * size[0], fine_size[0]), min(2 * size[1], fine_size[1]))
            out = resize_to(out, size)
        return add(fine, out)


class TwoWayPyramid(Module):
    """Parallel top-down and bottom-up aggregation of a fine-to-coarse pyramid."""

    def __init__(  # noqa: PLR0913
        self,
        channels: int,
        levels: int,
        rng: np.random.Generator,
        *,
        combine: str = COMBINE_SUM,
        top_down: bool = True,
        bottom_up: bool = True,
    ) -> None:
        """Build the downsampling and output convolutions."""
        if levels < 2:  # noqa: PLR2004
            msg = f"A pyramid needs at least two levels, got {levels}"
            raise PyFuValueError(msg)
        if combine not in (COMBINE_SUM, COMBINE_CONCAT):
            msg = f"Unknown pyramid combination: {combine}"
            raise PyFuValueError(msg)
        if not (top_down or bottom_up):
            msg = "At least one pyramid path must be enabled"
            raise PyFuValueError(msg)
        self.levels = levels
        self.combine = combine
        self.top_down = top_down
        self.bottom_up = bottom_up
        both = top_down and bottom_up and combine == COMBINE_CONCAT
        self.downsample = (
            [SeparableConv(channels, channels, rng, stride=2) for _ in range(levels - 1)] if bottom_up else []
        )
        self.outputs = [SeparableConv(2 * channels if both else channels, channels, rng) for _ in range(levels)]

    def forward(self, features: Sequence[Tensor]) -> list[Tensor]:
        """Aggregate equal-channel maps ordered fine to coarse."""
        if len(features) != self.levels:
            msg = f"Pyramid expects {self.levels} maps, got {len(features)}"
            raise PyFuShapeError(msg)
        sizes = [spatial_size(feature) for feature in features]
        top: list[Tensor | None] = [None] * self.levels
        bottom: list[Tensor | None] = [None] * self.levels
        if self.top_down:
            top[-1] = features[-1]
            for level in range(self.levels - 2, -1, -1):
                top[level] = add(features[level], resize_to(top[level + 1], sizes[level]))
        if self.bottom_up:
            bottom[0] = features[0]
            for level in range(1, self.levels):
                down = self.downsample[level - 1](bottom[level - 1])
                bottom[level] = add(features[level], resize_to(down, sizes[level]))

        outputs = []
        for level in range(self.levels):
            paths = [path for path in (top[level], bottom[level]) if path is not None]
            if len(paths) == 1:
                merged = paths[0]
            elif self.combine == COMBINE_SUM:
                merged = add(paths[0], paths[1])
            else:
                merged = concat(paths, axis=1)
            outputs.append(self.outputs[level](merged))
        return outputs


def check_pyramid(features: Sequence[Tensor]) -> None:
    """Require strictly decreasing spatial sizes from fine to coarse."""
    sizes = [spatial_size(feature) for feature in features]
    for finer, coarser in zip(sizes, sizes[1:], strict=False):
        if not (coarser[0] <= finer[0] and coarser[1] <= finer[1] and coarser != finer):
            msg = f"Feature sizes {sizes} are not a fine-to-coarse pyramid"
            raise PyFuShapeError(msg)


class TwoWayFPN(Module):
    """Lateral 1x1 projections followed by a two-way pyramid."""

    def __init__(
        self,
        in_channels: Sequence[int],
        channels: int,
        rng: np.random.Generator,
        *,
        combine: str = COMBINE_SUM,
    ) -> None:
        """Build one lateral projection per input scale."""
        self.laterals = [ConvNormAct(count, channels, 1, rng) for count in in_channels]
        self.pyramid = TwoWayPyramid(channels, len(self.laterals), rng, combine=combine)

    def forward(self, features: Sequence[Tensor]) -> list[Tensor]:
        """Return one `channels`-wide map per input scale."""
        check_pyramid(features)
        if len(features) != len(self.laterals):
            msg = f"FPN expects {len(self.laterals)} maps, got {len(features)}"
            raise PyFuShapeError(msg)
        return self.pyramid([lateral(x) for lateral, x in zip(self.laterals, features, strict=True)])


class SemanticHead(Module):
    """DPC on the coarsest map, LSFE on the finer ones, mismatch correction merges, 1x1 fuse."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        *,
        levels: int = 3,
        dilations: Sequence[Pair] = DEFAULT_DPC_DILATIONS,
    ) -> None:
        """Build the head for `levels` scales."""
        self.dpc = DPC(channels, channels, rng, dilations=dilations)
        self.lsfe = [LSFE(channels, channels, rng) for _ in range(levels - 1)]
        self.correct = [MismatchCorrection(channels, rng) for _ in range(levels - 1)]
        self.fuse = ConvNormAct(channels * levels, channels, 1, rng)

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        """Return head features at the finest input scale."""
        if len(features) != len(self.lsfe) + 1:
            msg = f"Semantic head expects {len(self.lsfe) + 1} maps, got {len(features)}"
            raise PyFuShapeError(msg)
        merged = [self.dpc(features[-1])]
        for level in range(len(features) - 2, -1, -1):
            fine = self.lsfe[level](features[level])
            merged.insert(0, self.correct[level](fine, merged[0]))
        target = spatial_size(merged[0])
        return self.fuse(concat([resize_to(feature, target) for feature in merged], axis=1))

