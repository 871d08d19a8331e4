"""Tests for the kNN refinement."""

import numpy as np
import pytest

from pyfu.data import PointCloud, ProjectionIndex, RangeImage, SensorConfig
from pyfu.errors import PyFuShapeError, PyFuValueError
from pyfu.postprocess import KnnConfig, brute_force_knn_oracle, gaussian_kernel, knn_postprocess
from pyfu.selftest import random_knn_instance


def single_point(neighbour_range, centre_label=1, neighbour_label=2):
    """One point at range 5 in the centre of a 3x3 raster of neighbours."""
    cloud = PointCloud(np.array([[5.0, 0.0, 0.0, 0.5]]))
    pixel_to_point = np.full((3, 3), -1)
    pixel_to_point[1, 1] = 0
    index = ProjectionIndex(
        u=np.array([1]),
        v=np.array([1]),
        in_fov=np.array([True]),
        pixel_to_point=pixel_to_point,
    )
    channels = np.zeros((5, 3, 3), dtype=np.float32)
    channels[0] = neighbour_range
    channels[0, 1, 1] = 5.0
    labels = np.full((3, 3), neighbour_label)
    labels[1, 1] = centre_label
    image = RangeImage(channels=channels, mask=np.ones((3, 3), dtype=bool), labels=labels)
    return cloud, index, image, labels


class TestKnnConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"window": 4}, {"window": 0}, {"k": 0}, {"window": 3, "k": 10}, {"cutoff": -1.0}, {"sigma": 0.0}],
    )
    def test_rejects_invalid_settings(self, kwargs):
        with pytest.raises(PyFuValueError):
            KnnConfig(**kwargs)

    def test_gaussian_kernel(self):
        kernel = gaussian_kernel(5, 1.0).reshape(5, 5)
        assert kernel.sum() == pytest.approx(1.0)
        assert kernel.argmax() == 12
        np.testing.assert_allclose(kernel, kernel.T)
        np.testing.assert_allclose(kernel, kernel[::-1, ::-1])


class TestKnnPostprocess:
    def test_isolated_label_is_outvoted(self):
        cloud, index, image, labels = single_point(neighbour_range=5.0)
        config = KnnConfig(window=3, k=5, cutoff=1.0, sigma=1.0)
        assert knn_postprocess(cloud, index, image, labels, config).tolist() == [2]

    def test_far_neighbours_are_cut_off(self):
        cloud, index, image, labels = single_point(neighbour_range=15.0)
        config = KnnConfig(window=3, k=5, cutoff=1.0, sigma=1.0)
        assert knn_postprocess(cloud, index, image, labels, config).tolist() == [1]

    def test_unlabelled_pixels_never_vote(self):
        cloud, index, image, labels = single_point(neighbour_range=5.0, neighbour_label=-1)
        config = KnnConfig(window=3, k=9, cutoff=1.0, sigma=1.0)
        assert knn_postprocess(cloud, index, image, labels, config).tolist() == [1]

    def test_unweighted_votes_count_neighbours(self):
        cloud, index, image, labels = single_point(neighbour_range=5.0)
        config = KnnConfig(window=3, k=1, cutoff=1.0, sigma=1.0, weighted=False)
        # All distances are zero, so the first window slot wins.
        assert knn_postprocess(cloud, index, image, labels, config).tolist() == [2]

    def test_window_of_one_keeps_pixel_labels(self, rng):
        cloud, index, image, labels, _ = random_knn_instance(rng, SensorConfig(height=16, width=64), 300)
        refined = knn_postprocess(cloud, index, image, labels, KnnConfig(window=1, k=1))
        np.testing.assert_array_equal(refined, labels[index.v, index.u])

    def test_pixel_labels_must_match_the_raster(self):
        cloud, index, image, labels = single_point(neighbour_range=5.0)
        with pytest.raises(PyFuShapeError):
            knn_postprocess(cloud, index, image, labels[:2], KnnConfig(window=3, k=3))

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_the_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cloud, index, image, labels, config = random_knn_instance(rng, SensorConfig(height=16, width=128), 400)
        fast = knn_postprocess(cloud, index, image, labels, config)
        np.testing.assert_array_equal(fast, brute_force_knn_oracle(cloud, index, image, labels, config))

    def test_workers_do_not_change_the_result(self, rng):
        cloud, index, image, labels, config = random_knn_instance(rng, SensorConfig(height=32, width=512), 20_000)
        serial = knn_postprocess(cloud, index, image, labels, config)
        parallel = knn_postprocess(cloud, index, image, labels, config, workers=3)
        np.testing.assert_array_equal(serial, parallel)
