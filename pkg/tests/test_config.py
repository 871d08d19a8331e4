"""Tests for run configuration loading and overrides."""

from pathlib import Path

import pytest

from pyfu.config import build_run_config, load_run_config, run_name
from pyfu.const import PRESET_BASELINE, PRESET_PFB
from pyfu.dataio import load_label_map
from pyfu.errors import PyFuConfigError
from pyfu.network import PyFuConfig
from pyfu.traineval import TARGET_CAMERA

CONFIG_DIR = Path(__file__).parents[1] / "config"


class TestLoadRunConfig:
    def test_defaults_without_a_file(self):
        config = load_run_config(None)
        assert config.model == PyFuConfig()
        assert config.sensor.height == 64
        assert config.sensor.width == 2048
        assert config.run_name == "pfb-pfh-seed-0"
        assert config.logging.default == "info"

    def test_desk_configuration(self):
        config = load_run_config(CONFIG_DIR / "desk.toml")
        assert (config.sensor.height, config.sensor.width) == (32, 256)
        assert config.synth.sensor == config.sensor
        assert config.synth.crates == (3, 3)
        assert config.model.channels == 16
        assert config.model.dpc_dilations[2] == (6, 21)
        assert not config.model.freeze_lidar
        assert config.threads == 2
        assert config.data.root == Path("data/synthetic")
        assert config.data.lidar_checkpoint is None
        assert config.logging.logs == {"pyfu": "info"}

    def test_label_map_file(self):
        lookup = load_label_map(CONFIG_DIR / "semantic-kitti.toml")
        assert lookup[[10, 252, 60, 0, 99]].tolist() == [0, 0, 8, 255, 255]
        assert lookup[lookup != 255].max() == 18

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("seed = [\n", encoding="utf-8")
        with pytest.raises(PyFuConfigError, match="not valid TOML"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PyFuConfigError, match="Cannot read"):
            load_run_config(tmp_path / "absent.toml")


class TestBuildRunConfig:
    @pytest.mark.parametrize(
        "raw",
        [
            {"epochs": 3},
            {"model": {"width": 3}},
            {"train": {"steps": "ten"}},
            {"train": {"optimizer": "rmsprop"}},
            {"preset": "early"},
            {"model": {"strategy": "4irb"}},
            {"knn": {"window": 4}},
            {"sensor": {"fov_up": -30.0}},
            {"synth": {"crates": [1, 2, 3]}},
            {"logging": {"default": "loud"}},
        ],
    )
    def test_rejects_invalid_values(self, raw):
        with pytest.raises(PyFuConfigError):
            build_run_config(raw)

    def test_preset_overrides_model_flags(self):
        config = build_run_config({"preset": PRESET_PFB, "model": {"fusion_head": True}})
        assert config.model.pyramid_fusion
        assert not config.model.fusion_head

    def test_seed_reaches_every_random_consumer(self):
        config = build_run_config({"seed": 9})
        assert config.train.seed == 9
        assert config.synth.seed == 9

    def test_log_levels_are_case_insensitive(self):
        assert build_run_config({"logging": {"default": "DEBUG"}}).logging.default == "debug"

    def test_sequences_become_tuples(self):
        config = build_run_config({"train": {"crop_size": [8, 32]}, "synth": {"image_size": [24, 48]}})
        assert config.train.crop_size == (8, 32)
        assert config.synth.image_size == (24, 48)


class TestOverrides:
    def test_flags_win_over_the_file(self):
        config = build_run_config({"seed": 1, "train": {"steps": 50}}).with_overrides(
            seed=7,
            preset=PRESET_BASELINE,
            steps=5,
            threads=3,
        )
        assert (config.seed, config.threads) == (7, 3)
        assert config.train.steps == 5
        assert config.train.seed == 7
        assert config.synth.seed == 7
        assert not config.model.uses_camera
        assert config.run_name == "baseline-seed-7"

    def test_no_flags_keep_the_file_values(self):
        config = build_run_config({"seed": 1, "train": {"steps": 50}})
        assert config.with_overrides() == config

    def test_unknown_preset(self):
        with pytest.raises(PyFuConfigError):
            load_run_config(None).with_overrides(preset="early")

    def test_invalid_steps(self):
        with pytest.raises(PyFuConfigError):
            load_run_config(None).with_overrides(steps=0)

    @pytest.mark.parametrize(
        ("flags", "match"),
        [({"seed": -1}, "Seed"), ({"threads": 0}, "Threads"), ({"threads": -5}, "Threads")],
    )
    def test_out_of_range_flags(self, flags, match):
        with pytest.raises(PyFuConfigError, match=match):
            load_run_config(None).with_overrides(**flags)


class TestRunName:
    def test_slug(self):
        assert run_name("pfb-pfh", 0) == "pfb-pfh-seed-0"

    def test_camera_stage_is_named_after_the_target(self):
        assert run_name(PRESET_PFB, 3, TARGET_CAMERA) == "camera-seed-3"
