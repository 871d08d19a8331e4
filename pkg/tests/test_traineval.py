"""Tests for weighting, scheduling, metrics, training and evaluation."""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pyfu.config import load_run_config
from pyfu.const import IGNORE_LABEL, PRESET_BASELINE, PRESET_PFB_PFH, STRATEGY_BOTTLENECK
from pyfu.dataio import gen_synthetic
from pyfu.errors import PyFuValueError
from pyfu.network import PyFuNetwork
from pyfu.postprocess import KnnConfig
from pyfu.traineval import (
    OPTIMIZER_ADAM,
    TARGET_CAMERA,
    TARGET_NETWORK,
    ConfusionMatrix,
    TrainConfig,
    build_sample,
    class_histogram,
    class_weights,
    confusion_update,
    evaluate_pixels,
    evaluate_points,
    image_label_histogram,
    iou_miou,
    poly_lr,
    stage_config,
    train_loop,
)

CONFIG_DIR = Path(__file__).parents[1] / "config"


def snapshot(module):
    return {name: param.data.copy() for name, param in module.named_params()}


class TestSchedule:
    def test_poly_lr_endpoints(self):
        assert poly_lr(0, 100, 0.07) == pytest.approx(0.07)
        assert poly_lr(100, 100, 0.07) == 0.0

    def test_poly_lr_midpoint(self):
        assert poly_lr(50, 100, 1.0, 0.9) == pytest.approx(1 - 0.5**0.9)

    def test_poly_lr_is_monotone(self):
        rates = [poly_lr(step, 20, 0.1) for step in range(21)]
        assert all(a > b for a, b in zip(rates, rates[1:], strict=False))

    def test_poly_lr_rejects_out_of_range_steps(self):
        with pytest.raises(PyFuValueError):
            poly_lr(101, 100, 0.07)

    @pytest.mark.parametrize(
        "kwargs",
        [{"base_lr": 0.0}, {"steps": 0}, {"batch_size": 0}, {"optimizer": "rmsprop"}, {"target": "both"}],
    )
    def test_train_config_validation(self, kwargs):
        with pytest.raises(PyFuValueError):
            TrainConfig(**kwargs)


class TestClassWeights:
    def test_rare_classes_weigh_more(self):
        weights = class_weights([100, 10, 1])
        assert weights[0] < weights[1] < weights[2]
        assert weights[0] == pytest.approx(math.log(111 / 100))

    def test_absent_classes_get_the_rarest_weight(self):
        weights = class_weights([10, 0, 5])
        assert weights[1] == weights[2]
        assert (weights > 0).all()

    def test_single_class_falls_back_to_uniform(self):
        np.testing.assert_array_equal(class_weights([5, 0]), [1.0, 1.0])

    def test_empty_histogram(self):
        with pytest.raises(PyFuValueError):
            class_weights([0, 0])

    def test_overlap_histogram_counts_fewer_points(self, tiny_frames):
        everything = class_histogram(tiny_frames, 6, overlap_only=False)
        overlap = class_histogram(tiny_frames, 6)
        assert everything.sum() == sum(len(bundle.cloud) for bundle in tiny_frames)
        assert 0 < overlap.sum() < everything.sum()
        assert (overlap <= everything).all()

    def test_image_histogram_skips_sky(self, tiny_frames):
        histogram = image_label_histogram(tiny_frames, 6)
        labelled = sum(int((bundle.image_labels != IGNORE_LABEL).sum()) for bundle in tiny_frames)
        assert histogram.sum() == labelled


class TestStageConfig:
    def test_camera_stage_unfreezes_the_camera(self, micro_config):
        frozen = replace(micro_config, freeze_lidar=True, freeze_camera=True)
        staged = stage_config(frozen, TARGET_CAMERA)
        assert not staged.freeze_camera
        assert staged.freeze_lidar

    def test_baseline_stage_unfreezes_the_lidar(self, micro_config):
        frozen = replace(micro_config.with_preset(PRESET_BASELINE), freeze_lidar=True)
        assert not stage_config(frozen, TARGET_NETWORK).freeze_lidar

    def test_fusion_stage_keeps_the_backbones(self, micro_config):
        frozen = replace(micro_config, freeze_lidar=True, freeze_camera=True)
        assert stage_config(frozen, TARGET_NETWORK) == frozen


class TestMetrics:
    def test_hand_computed_iou(self):
        result = iou_miou(ConfusionMatrix.from_counts(np.array([[3, 1], [2, 4]])))
        np.testing.assert_allclose(result.iou, [0.5, 4 / 7])
        assert result.miou == pytest.approx(0.5357, abs=1e-4)
        assert result.accuracy == pytest.approx(0.7)

    def test_update_counts_rows_as_ground_truth(self):
        matrix = ConfusionMatrix(3).update(np.array([0, 2, 2]), np.array([0, 1, 2]))
        expected = np.zeros((3, 3), dtype=np.int64)
        expected[0, 0] = expected[1, 2] = expected[2, 2] = 1
        np.testing.assert_array_equal(matrix.counts, expected)

    def test_ignore_label_is_skipped(self):
        matrix = ConfusionMatrix(2).update(np.array([0, 1]), np.array([0, IGNORE_LABEL]))
        assert matrix.total == 1

    def test_mask_excludes_points(self):
        targets = np.array([0, 1, 1, 0, 1])
        predictions = np.array([0, 1, 0, 0, 1])
        overlap = np.array([True, True, False, True, True])
        baseline = ConfusionMatrix(2).update(predictions, targets, overlap).counts
        mutated = predictions.copy()
        mutated[~overlap] = 1 - mutated[~overlap]
        np.testing.assert_array_equal(confusion_update(ConfusionMatrix(2), mutated, targets, overlap).counts, baseline)

    def test_labels_outside_the_classes(self):
        with pytest.raises(PyFuValueError):
            ConfusionMatrix(2).update(np.array([2]), np.array([0]))

    def test_merge(self):
        first = ConfusionMatrix(2).update(np.array([0]), np.array([0]))
        second = ConfusionMatrix(2).update(np.array([1]), np.array([0]))
        assert first.merge(second).counts.tolist() == [[1, 1], [0, 0]]
        with pytest.raises(PyFuValueError):
            first.merge(ConfusionMatrix(3))

    def test_absent_classes(self):
        matrix = ConfusionMatrix.from_counts(np.array([[2, 0, 0], [1, 1, 0], [0, 0, 0]]))
        result = iou_miou(matrix)
        assert math.isnan(result.iou[2])
        assert result.miou == pytest.approx((2 / 3 + 0.5) / 2)
        assert iou_miou(matrix, include_absent=True).miou == pytest.approx((2 / 3 + 0.5) / 3)
        record = result.as_record()["iou"]
        assert record[:2] == pytest.approx([2 / 3, 0.5])
        assert record[2] is None

    def test_empty_matrix(self):
        with pytest.raises(PyFuValueError):
            iou_miou(ConfusionMatrix(2))


class TestTrainLoop:
    def config(self, **changes):
        return TrainConfig(**{"base_lr": 0.01, "steps": 2, "eval_every": 1, "seed": 4, **changes})

    def test_same_seed_same_log(self, micro_config, tiny_samples, tmp_path):
        weights = np.ones(6)
        logs = []
        for attempt in range(2):
            path = tmp_path / f"run-{attempt}.jsonl"
            train_loop(
                tiny_samples,
                PyFuNetwork(micro_config, 0),
                self.config(),
                weights,
                eval_samples=tiny_samples,
                log_path=path,
            )
            logs.append(path.read_text(encoding="utf-8"))
        assert logs[0] == logs[1]
        records = [json.loads(line) for line in logs[0].splitlines()]
        assert [record["step"] for record in records] == [1, 2]
        assert set(records[-1]) == {"accuracy", "iou", "loss", "lr", "miou", "step"}
        assert records[0]["lr"] == pytest.approx(0.01)

    def test_losses_and_evaluations(self, micro_config, tiny_samples):
        result = train_loop(
            tiny_samples,
            PyFuNetwork(micro_config, 0),
            self.config(steps=3, eval_every=2, optimizer=OPTIMIZER_ADAM),
            np.ones(6),
            eval_samples=tiny_samples,
        )
        assert len(result.losses) == 3
        assert all(math.isfinite(loss) for loss in result.losses)
        assert [record["step"] for record in result.evaluations] == [2, 3]
        assert result.final is result.evaluations[-1]

    def test_frozen_backbones_are_not_updated(self, micro_config, tiny_samples):
        network = PyFuNetwork(replace(micro_config, freeze_lidar=True, freeze_camera=True), 0)
        lidar, fusion = snapshot(network.lidar), snapshot(network.pfb)
        train_loop(tiny_samples, network, self.config(steps=10), np.ones(6))
        after = snapshot(network.lidar)
        assert all(np.array_equal(lidar[name], after[name]) for name in lidar)
        moved = snapshot(network.pfb)
        assert any(not np.array_equal(fusion[name], moved[name]) for name in fusion)

    def test_camera_target_trains_only_the_camera(self, micro_config, tiny_frames, tiny_samples):
        network = PyFuNetwork(stage_config(micro_config, TARGET_CAMERA), 0)
        lidar, camera = snapshot(network.lidar), snapshot(network.camera)
        weights = class_weights(image_label_histogram(tiny_frames, 6))
        train_loop(tiny_samples, network, self.config(steps=1, target=TARGET_CAMERA), weights)
        after = snapshot(network.lidar)
        assert all(np.array_equal(lidar[name], after[name]) for name in lidar)
        moved = snapshot(network.camera)
        assert any(not np.array_equal(camera[name], moved[name]) for name in camera)

    def test_empty_training_set(self, micro_config):
        with pytest.raises(PyFuValueError):
            train_loop([], PyFuNetwork(micro_config, 0), self.config(), np.ones(6))

    @pytest.mark.slow
    def test_overfits_a_single_frame(self, micro_config, tiny_samples):
        network = PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 0)
        result = train_loop(
            tiny_samples[:1],
            network,
            self.config(steps=150, base_lr=0.05, flip_probability=0.0, eval_every=0),
            np.ones(6),
        )
        assert np.mean(result.losses[-10:]) < 0.5 * np.mean(result.losses[:10])


class TestEvaluation:
    def test_pixel_evaluation_restores_the_mode(self, micro_config, tiny_samples):
        network = PyFuNetwork(micro_config, 0)
        result = evaluate_pixels(network, tiny_samples)
        assert network.training
        assert 0.0 <= result.miou <= 1.0

    def test_camera_pixel_evaluation(self, micro_config, tiny_samples):
        result = evaluate_pixels(PyFuNetwork(micro_config, 0), tiny_samples, target=TARGET_CAMERA)
        assert len(result.iou) == 6

    def test_point_evaluation(self, micro_config, tiny_frames, tiny_sensor):
        network = PyFuNetwork(micro_config, 0)
        evaluation = evaluate_points(network, tiny_frames, tiny_sensor, KnnConfig())
        assert evaluation.result is not None
        assert set(evaluation.predictions) == {bundle.frame_id for bundle in tiny_frames}
        for bundle in tiny_frames:
            predictions = evaluation.predictions[bundle.frame_id]
            assert predictions.shape == (len(bundle.cloud),)
            scored = predictions != IGNORE_LABEL
            assert scored.any()
            assert not scored.all()
            assert predictions[scored].max() < 6
            assert evaluation.pixel_labels[bundle.frame_id].shape == (8, 64)

    def test_point_evaluation_without_labels(self, micro_config, tiny_frames, tiny_sensor):
        unlabelled = [replace(bundle, cloud=replace(bundle.cloud, labels=None)) for bundle in tiny_frames]
        evaluation = evaluate_points(PyFuNetwork(micro_config, 0), unlabelled, tiny_sensor, KnnConfig())
        assert evaluation.result is None
        assert len(evaluation.predictions) == len(tiny_frames)


def desk_run(steps=None):
    config = load_run_config(CONFIG_DIR / "desk.toml")
    train = config.train if steps is None else replace(config.train, steps=steps)
    bundles = gen_synthetic(config.synth)
    samples = [build_sample(bundle, config.sensor) for bundle in bundles]
    weights = class_weights(class_histogram(bundles, config.model.num_classes))
    network = PyFuNetwork(config.model, config.seed)
    return network, samples, train_loop(samples, network, train, weights)


@pytest.mark.slow
class TestDeskOverfit:
    def test_desk_preset_is_fused_with_basic_residual_blocks(self):
        config = load_run_config(CONFIG_DIR / "desk.toml")
        assert config.preset == PRESET_PFB_PFH
        assert config.model.strategy == STRATEGY_BOTTLENECK
        assert config.synth.frames == 4

    def test_same_seed_same_losses(self):
        assert desk_run(steps=3)[2].losses == desk_run(steps=3)[2].losses

    def test_reaches_overlap_accuracy(self):
        network, samples, _ = desk_run()
        assert evaluate_pixels(network, samples).accuracy >= 0.99
