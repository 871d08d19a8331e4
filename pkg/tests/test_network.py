"""Tests for the fusion network, its presets and the per-point forward."""

import logging
from dataclasses import replace

import numpy as np
import pytest

from pyfu.const import (
    LATE_FUSION_LIDAR_FIRST,
    PRESET_BASELINE,
    PRESET_LATE_FUSION,
    PRESET_PFB,
    PRESET_PFB_PFH,
    PRESETS,
)
from pyfu.errors import PyFuConfigError, PyFuShapeError
from pyfu.network import PyFuConfig, PyFuNetwork, image_tensor, pyfu_forward, range_tensor
from pyfu.numcore import Tensor, backward, sum_all


def run(network, sample, *, camera=True):
    return network(
        range_tensor(sample.range_image, network.config),
        image_tensor(sample.image) if camera else None,
        sample.mapping if camera else None,
    )


class TestPyFuConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            {"num_classes": 1},
            {"lidar_widths": (4, 4, 4)},
            {"camera_widths": (4, 4)},
            {"channels": 0},
            {"strategy": "4irb"},
            {"late_fusion_order": "sideways"},
            {"pyramid_combine": "max"},
            {"pyramid_fusion": False, "fusion_head": True},
            {"late_fusion": True, "fusion_head": True},
            {"fusion_octave": -1},
            {"range_means": (0.0,)},
        ],
    )
    def test_rejects_inconsistent_settings(self, changes):
        with pytest.raises(PyFuConfigError):
            PyFuConfig(**changes)

    @pytest.mark.parametrize(
        ("preset", "flags", "modules"),
        [
            (PRESET_BASELINE, (False, False, False), 0),
            (PRESET_LATE_FUSION, (False, False, True), 1),
            (PRESET_PFB, (True, False, False), 3),
            (PRESET_PFB_PFH, (True, True, False), 5),
        ],
    )
    def test_presets(self, preset, flags, modules):
        config = PyFuConfig().with_preset(preset)
        assert (config.pyramid_fusion, config.fusion_head, config.late_fusion) == flags
        assert config.fusion_module_count == modules
        assert config.uses_camera == (preset != PRESET_BASELINE)

    def test_unknown_preset(self):
        with pytest.raises(PyFuConfigError):
            PyFuConfig().with_preset("early")


class TestPyFuNetwork:
    @pytest.mark.parametrize("preset", PRESETS)
    def test_builds_one_module_per_configured_fusion(self, micro_config, preset):
        config = micro_config.with_preset(preset)
        assert len(PyFuNetwork(config, 0).fusion_modules()) == config.fusion_module_count

    def test_late_fusion_order(self, micro_config):
        network = PyFuNetwork(replace(micro_config, late_fusion_order=LATE_FUSION_LIDAR_FIRST), 0)
        assert [module.camera for module in network.late] == [False, True]
        network = PyFuNetwork(micro_config, 0)
        assert [module.camera for module in network.late] == [True, False]

    def test_same_seed_same_weights(self, micro_config):
        first = PyFuNetwork(micro_config, 5).params()
        second = PyFuNetwork(micro_config, 5).params()
        assert all(np.array_equal(a.data, b.data) for a, b in zip(first, second, strict=True))

    def test_parameters_are_named_by_path(self, micro_config):
        names = [param.name for param in PyFuNetwork(micro_config, 0).params()]
        assert "lidar.stem.conv.weight" in names
        assert "classifier.bias" in names
        assert len(set(names)) == len(names)

    @pytest.mark.parametrize("preset", [PRESET_LATE_FUSION, PRESET_PFB, PRESET_PFB_PFH])
    def test_fused_logits_cover_the_overlap(self, micro_config, tiny_samples, preset):
        sample = tiny_samples[0]
        output = run(PyFuNetwork(micro_config.with_preset(preset), 0), sample)
        (r0, r1), (c0, c1) = sample.mapping.rows, sample.mapping.columns
        assert output.fused
        assert output.logits.shape == (1, 6, r1 - r0, c1 - c0)
        assert (output.rows, output.columns) == ((r0, r1), (c0, c1))
        np.testing.assert_allclose(output.probabilities.data.sum(axis=1), 1.0, rtol=1e-5)

    def test_baseline_predicts_the_full_view(self, micro_config, tiny_samples):
        network = PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 0)
        output = run(network, tiny_samples[0], camera=False)
        assert not output.fused
        assert output.logits.shape == (1, 6, 8, 64)

    def test_baseline_crops_to_a_given_mapping(self, micro_config, tiny_samples):
        sample = tiny_samples[0]
        network = PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 0)
        output = run(network, sample)
        (r0, r1), (c0, c1) = sample.mapping.rows, sample.mapping.columns
        assert output.logits.shape == (1, 6, r1 - r0, c1 - c0)
        assert not output.fused

    def test_missing_camera_falls_back_to_lidar(self, micro_config, tiny_samples, caplog):
        network = PyFuNetwork(micro_config, 0)
        with caplog.at_level(logging.WARNING):
            output = run(network, tiny_samples[0], camera=False)
        assert not output.fused
        assert output.logits.shape == (1, 6, 8, 64)
        assert "falling back" in caplog.text

    def test_range_view_size_is_checked(self, micro_config):
        network = PyFuNetwork(micro_config, 0)
        with pytest.raises(PyFuShapeError):
            network(Tensor(np.zeros((1, 5, 8, 48), dtype=np.float32)))

    def test_camera_size_is_checked(self, micro_config):
        network = PyFuNetwork(micro_config, 0)
        with pytest.raises(PyFuShapeError):
            network.camera_logits(Tensor(np.zeros((1, 3, 32, 40), dtype=np.float32)))

    def test_camera_logits_are_full_resolution(self, micro_config, tiny_samples):
        network = PyFuNetwork(micro_config, 0)
        assert network.camera_logits(image_tensor(tiny_samples[0].image)).shape == (1, 6, 32, 64)

    def test_frozen_backbones_get_no_gradient(self, micro_config, tiny_samples):
        config = replace(micro_config, freeze_lidar=True, freeze_camera=True)
        network = PyFuNetwork(config, 0)
        assert not network.lidar.training
        assert not network.camera.training
        assert network.pfb.training
        backward(sum_all(run(network, tiny_samples[0]).logits))
        assert all(param.grad is None for param in network.lidar.params())
        assert all(param.grad is None for param in network.camera.params())
        assert network.classifier.weight.grad is not None

    @pytest.mark.parametrize("preset", PRESETS)
    def test_every_trainable_parameter_gets_a_gradient(self, micro_config, tiny_samples, preset):
        network = PyFuNetwork(micro_config.with_preset(preset), 0)
        assert network.missing_gradients()
        backward(sum_all(run(network, tiny_samples[0]).logits))
        assert network.missing_gradients() == []

    def test_graph_leaves_out_unused_heads(self, micro_config):
        network = PyFuNetwork(micro_config.with_preset(PRESET_PFB), 0)
        graph = {param.name for module in network.graph_modules() for param in module.params()}
        assert "lidar.classifier.weight" not in graph
        assert "camera.lateral.conv.weight" not in graph
        assert {param.name for param in network.pfb.params()} <= graph
        baseline = PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 0)
        assert baseline.graph_modules() == [baseline.lidar]

    def test_frozen_running_statistics_do_not_move(self, micro_config, tiny_samples):
        network = PyFuNetwork(replace(micro_config, freeze_lidar=True), 0)
        before = network.lidar.stem.norm.running_mean.copy()
        run(network, tiny_samples[0])
        np.testing.assert_array_equal(network.lidar.stem.norm.running_mean, before)


class TestPyFuForward:
    def test_scores_live_in_the_overlap(self, micro_config, tiny_frames, tiny_sensor):
        network = PyFuNetwork(micro_config, 0).train(mode=False)
        bundle = tiny_frames[0]
        scores = pyfu_forward(network, bundle, tiny_sensor)
        assert scores.probabilities.shape == (len(bundle.cloud), 6)
        assert scores.mask.any()
        assert not scores.mask.all()
        np.testing.assert_allclose(scores.probabilities[scores.mask].sum(axis=1), 1.0, rtol=1e-5)
        assert (scores.probabilities[~scores.mask] == 0).all()
        assert (scores.labels[~scores.mask] == -1).all()

    def test_pixel_labels_outside_the_window(self, micro_config, tiny_frames, tiny_sensor):
        network = PyFuNetwork(micro_config, 0).train(mode=False)
        scores = pyfu_forward(network, tiny_frames[0], tiny_sensor)
        labels = scores.pixel_labels
        rows = np.flatnonzero((labels >= 0).any(axis=1))
        columns = np.flatnonzero((labels >= 0).any(axis=0))
        outside = np.ones(labels.shape, dtype=bool)
        outside[rows[0] : rows[-1] + 1, columns[0] : columns[-1] + 1] = False
        assert (labels[outside] == -1).all()

    def test_baseline_without_camera_scores_every_point(self, micro_config, tiny_frames, tiny_sensor):
        network = PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 0).train(mode=False)
        scores = pyfu_forward(network, tiny_frames[0], tiny_sensor, use_camera=False)
        assert scores.mask.all()
        assert (scores.pixel_labels >= 0).all()
