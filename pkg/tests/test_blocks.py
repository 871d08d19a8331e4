"""Tests for the network building blocks."""

import numpy as np
import pytest

from pyfu.blocks import (
    DPC,
    LSFE,
    BasicResidual,
    BottleneckResidual,
    Conv2d,
    InvertedResidual,
    MismatchCorrection,
    NormAct,
    SemanticHead,
    SeparableConv,
    TwoWayFPN,
    TwoWayPyramid,
    check_pyramid,
    clamp_dilation,
    octave_count,
    residual_block,
    strategy_blocks,
)
from pyfu.const import (
    COMBINE_CONCAT,
    DEFAULT_DPC_DILATIONS,
    STRATEGY_BOTTLENECK,
    STRATEGY_DOUBLE_INVERTED,
    STRATEGY_INVERTED,
)
from pyfu.errors import PyFuShapeError, PyFuValueError
from pyfu.numcore import Tensor, backward, check_mode, gradcheck, mul, sum_all


def feature(rng, channels, height, width):
    return Tensor(rng.normal(size=(1, channels, height, width)).astype(np.float32))


class TestConvolutionUnits:
    def test_same_padding_keeps_size(self, rng):
        conv = Conv2d(3, 5, 3, rng, dilation=(2, 3))
        assert conv(feature(rng, 3, 9, 11)).shape == (1, 5, 9, 11)

    def test_stride_halves_with_ceiling(self, rng):
        conv = Conv2d(3, 5, 3, rng, stride=(1, 2))
        assert conv(feature(rng, 3, 9, 11)).shape == (1, 5, 9, 6)

    def test_dilation_override(self, rng):
        conv = Conv2d(2, 2, 3, rng)
        x = feature(rng, 2, 8, 8)
        assert not np.allclose(conv(x).data, conv(x, (2, 2)).data)

    def test_rejects_empty_channels(self, rng):
        with pytest.raises(PyFuValueError):
            Conv2d(0, 4, 3, rng)

    def test_separable_conv(self, rng):
        assert SeparableConv(4, 6, rng, stride=2)(feature(rng, 4, 8, 10)).shape == (1, 6, 4, 5)

    def test_norm_act_updates_running_statistics_only_in_training(self, rng):
        norm = NormAct(3)
        x = Tensor(rng.normal(2.0, 1.0, size=(2, 3, 4, 4)))
        norm(x)
        assert (norm.running_mean > 0).all()
        norm.train(mode=False)
        frozen = norm.running_mean.copy()
        norm(x)
        np.testing.assert_array_equal(norm.running_mean, frozen)

    def test_norm_act_buffers_reject_wrong_shapes(self):
        with pytest.raises(PyFuShapeError):
            NormAct(3).load_buffer("running_mean", np.zeros(4))


class TestResidualBlocks:
    def test_inverted_residual_skip(self, rng):
        assert InvertedResidual(4, 4, rng, expansion=2).residual
        assert not InvertedResidual(4, 8, rng, expansion=2).residual
        assert not InvertedResidual(4, 4, rng, stride=2, expansion=2).residual

    def test_inverted_residual_shapes(self, rng):
        block = InvertedResidual(4, 6, rng, stride=(1, 2), expansion=3)
        assert block(feature(rng, 4, 6, 8)).shape == (1, 6, 6, 4)

    @pytest.mark.parametrize(("cls", "kwargs"), [(BottleneckResidual, {"ratio": 2}), (BasicResidual, {})])
    def test_projection_shortcut_only_when_channels_change(self, rng, cls, kwargs):
        assert cls(4, 4, rng, **kwargs).shortcut is None
        block = cls(4, 8, rng, **kwargs)
        assert block.shortcut is not None
        assert block(feature(rng, 4, 5, 5)).shape == (1, 8, 5, 5)

    def test_bottleneck_width(self, rng):
        assert BottleneckResidual(8, 16, rng, ratio=4).width == 4
        assert BottleneckResidual(2, 2, rng, ratio=4).width == 1

    def test_unknown_variant(self, rng):
        with pytest.raises(PyFuValueError):
            residual_block("resnext", 4, 4, rng)

    @pytest.mark.parametrize(
        ("strategy", "types"),
        [
            (STRATEGY_BOTTLENECK, [BottleneckResidual, BasicResidual]),
            (STRATEGY_INVERTED, [InvertedResidual]),
            (STRATEGY_DOUBLE_INVERTED, [InvertedResidual, InvertedResidual]),
        ],
    )
    def test_strategies(self, rng, strategy, types):
        blocks = strategy_blocks(strategy, 5, 4, rng, expansion=2, ratio=2)
        assert [type(block) for block in blocks] == types
        x = feature(rng, 5, 4, 6)
        for block in blocks:
            x = block(x)
        assert x.shape == (1, 4, 4, 6)

    def test_unknown_strategy(self, rng):
        with pytest.raises(PyFuValueError):
            strategy_blocks("3irb", 4, 4, rng)

    def test_block_gradients(self, rng):
        with check_mode():
            block = BottleneckResidual(3, 4, rng, ratio=2)
            x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
            projection = Tensor(rng.normal(size=(2, 4, 4, 5)))
            error = gradcheck(lambda: sum_all(mul(block(x), projection)), [x, *[p.tensor for p in block.params()]])
        assert error < 1e-3


class TestSemanticHeadParts:
    @pytest.mark.parametrize(
        ("dilation", "size", "expected"),
        [
            ((6, 21), (2, 64), (1, 21)),
            ((18, 15), (8, 32), (3, 15)),
            ((6, 21), (4, 8), (1, 3)),
            ((1, 1), (1, 1), (1, 1)),
        ],
    )
    def test_clamp_dilation(self, dilation, size, expected):
        assert clamp_dilation(dilation, size) == expected

    def test_dpc_on_a_tiny_map(self, rng):
        dpc = DPC(4, 4, rng, dilations=((6, 21), (1, 1)))
        assert dpc.effective_dilations((2, 8)) == [(1, 3), (1, 1)]
        assert dpc(feature(rng, 4, 2, 8)).shape == (1, 4, 2, 8)

    def test_default_dilations_on_a_four_by_eight_map(self, rng):
        dpc = DPC(4, 4, rng, dilations=DEFAULT_DPC_DILATIONS)
        assert dpc.effective_dilations((4, 8)) == [(1, 3), (1, 1), (1, 3), (1, 3), (1, 3)]
        assert dpc(feature(rng, 4, 4, 8)).shape == (1, 4, 4, 8)

    def test_dpc_needs_branches(self, rng):
        with pytest.raises(PyFuValueError):
            DPC(4, 4, rng, dilations=())

    def test_lsfe(self, rng):
        assert LSFE(3, 4, rng)(feature(rng, 3, 4, 4)).shape == (1, 4, 4, 4)

    def test_octave_count(self):
        assert octave_count(64, 8) == 3
        assert octave_count(8, 8) == 0
        assert octave_count(24, 8) == 2

    def test_mismatch_correction_upsamples_in_steps(self, rng):
        correct = MismatchCorrection(4, rng)
        out = correct(feature(rng, 4, 4, 16), feature(rng, 4, 1, 2))
        assert out.shape == (1, 4, 4, 16)

    def test_mismatch_correction_rejects_finer_coarse_map(self, rng):
        with pytest.raises(PyFuShapeError):
            MismatchCorrection(4, rng)(feature(rng, 4, 2, 2), feature(rng, 4, 4, 4))

    def test_mismatch_correction_rejects_incompatible_aspect(self, rng):
        with pytest.raises(PyFuShapeError):
            MismatchCorrection(4, rng)(feature(rng, 4, 2, 32), feature(rng, 4, 2, 2))

    def test_semantic_head_returns_finest_scale(self, rng):
        head = SemanticHead(4, rng, levels=3, dilations=((1, 1), (1, 2)))
        out = head([feature(rng, 4, 4, 16), feature(rng, 4, 2, 8), feature(rng, 4, 1, 4)])
        assert out.shape == (1, 4, 4, 16)

    def test_semantic_head_level_count(self, rng):
        head = SemanticHead(4, rng, levels=3, dilations=((1, 1),))
        with pytest.raises(PyFuShapeError):
            head([feature(rng, 4, 4, 16), feature(rng, 4, 2, 8)])


class TestPyramids:
    def levels(self, rng, channels=4):
        return [feature(rng, channels, 8, 16), feature(rng, channels, 4, 8), feature(rng, channels, 2, 4)]

    @pytest.mark.parametrize(
        "kwargs",
        [{}, {"combine": COMBINE_CONCAT}, {"top_down": False}, {"bottom_up": False}],
    )
    def test_two_way_pyramid_keeps_scales(self, rng, kwargs):
        pyramid = TwoWayPyramid(4, 3, rng, **kwargs)
        outputs = pyramid(self.levels(rng))
        assert [out.shape for out in outputs] == [(1, 4, 8, 16), (1, 4, 4, 8), (1, 4, 2, 4)]

    def test_pyramid_without_bottom_up_has_no_downsampling(self, rng):
        assert TwoWayPyramid(4, 3, rng, bottom_up=False).downsample == []

    def test_pyramid_needs_a_path(self, rng):
        with pytest.raises(PyFuValueError):
            TwoWayPyramid(4, 3, rng, top_down=False, bottom_up=False)

    def test_pyramid_level_count(self, rng):
        with pytest.raises(PyFuShapeError):
            TwoWayPyramid(4, 2, rng)(self.levels(rng))

    def test_fpn_projects_channels(self, rng):
        fpn = TwoWayFPN([3, 5, 7], 4, rng)
        features = [feature(rng, 3, 8, 16), feature(rng, 5, 4, 8), feature(rng, 7, 2, 4)]
        assert [out.shape[1] for out in fpn(features)] == [4, 4, 4]

    def test_check_pyramid(self, rng):
        check_pyramid(self.levels(rng))
        with pytest.raises(PyFuShapeError):
            check_pyramid([feature(rng, 4, 4, 8), feature(rng, 4, 4, 8)])

    def test_pyramid_backpropagates_to_every_level(self, rng):
        pyramid = TwoWayPyramid(4, 3, rng)
        inputs = [Tensor(level.data, requires_grad=True) for level in self.levels(rng)]
        backward(sum_all(pyramid(inputs)[1]))
        assert all(level.grad is not None for level in inputs)
