"""Tests for the command line: exit codes and the synth, train, eval and infer pipeline."""

import json
import logging

import numpy as np
import pytest

from pyfu.cli import run_cli
from pyfu.const import EXIT_OK, EXIT_RUNTIME_ERROR, EXIT_USAGE_ERROR
from pyfu.dataio import read_labels, read_ppm, read_scan

TINY_RUN = """
seed = 0
preset = "pfb-pfh"

[model]
num_classes = 6
channels = 4
lidar_stem = 4
lidar_widths = [4, 4, 4, 4, 4, 4]
camera_stem = 4
camera_widths = [4, 4, 4, 4]
expansion = 2
bottleneck_ratio = 2
dpc_dilations = [[1, 1], [1, 2]]
freeze_lidar = false
freeze_camera = false

[sensor]
height = 8
width = 64

[train]
base_lr = 0.01
steps = 2
eval_every = 1

[synth]
frames = 2
image_size = [32, 64]
focal = 32.0

[data]
root = "{root}"
output = "{output}"
"""


@pytest.fixture(autouse=True)
def restore_logging():
    """Commands install their own handler; put the test runner's back afterwards."""
    root = logging.getLogger()
    package = logging.getLogger("pyfu")
    handlers, level, package_level = root.handlers[:], root.level, package.level
    yield
    root.handlers = handlers
    root.setLevel(level)
    package.setLevel(package_level)


def write_config(tmp_path, name="run.toml", **paths):
    values = {"root": (tmp_path / "data").as_posix(), "output": (tmp_path / "runs").as_posix(), **paths}
    path = tmp_path / name
    path.write_text(TINY_RUN.format(**values), encoding="utf-8")
    return path


def last_json(capsys):
    return json.loads(capsys.readouterr().out)


class TestExitCodes:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["train", "--bogus"],
            ["fit"],
            ["eval"],
            ["synth", "--seed", "-1"],
            ["eval", "x", "--threads", "0"],
        ],
    )
    def test_usage_errors(self, argv):
        assert run_cli(argv) == EXIT_USAGE_ERROR

    def test_version(self, capsys):
        assert run_cli(["--version"]) == EXIT_OK
        assert "pyfu" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert run_cli(["train", "--config", str(tmp_path / "absent.toml")]) == EXIT_USAGE_ERROR

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model]\nwidth = 3\n", encoding="utf-8")
        assert run_cli(["train", "--config", str(path)]) == EXIT_USAGE_ERROR

    def test_invalid_frame_count(self, tmp_path):
        assert run_cli(["synth", "--config", str(write_config(tmp_path)), "--frames", "0"]) == EXIT_USAGE_ERROR

    def test_missing_dataset(self, tmp_path):
        assert run_cli(["train", "--config", str(write_config(tmp_path))]) == EXIT_RUNTIME_ERROR

    def test_missing_checkpoint(self, tmp_path):
        config = write_config(tmp_path)
        assert run_cli(["eval", str(tmp_path / "absent.pyfu"), "--config", str(config)]) == EXIT_RUNTIME_ERROR


class TestPipeline:
    def test_synth(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run_cli(["synth", "--config", str(config), "--frames", "1"]) == EXIT_OK
        assert last_json(capsys) == {"frames": 1, "root": (tmp_path / "data").as_posix(), "seed": 0}
        scan = read_scan(tmp_path / "data" / "velodyne" / "000000.bin")
        assert 0 < len(scan) <= 8 * 64
        assert read_ppm(tmp_path / "data" / "image_2" / "000000.ppm").shape == (32, 64, 3)

    def test_train_eval_infer(self, tmp_path, capsys):
        config = str(write_config(tmp_path))
        runs = tmp_path / "runs"
        assert run_cli(["synth", "--config", config]) == EXIT_OK
        capsys.readouterr()

        assert run_cli(["train", "--config", config]) == EXIT_OK
        trained = last_json(capsys)
        assert trained["run"] == "pfb-pfh-seed-0"
        assert trained["steps"] == 2
        assert np.isfinite(trained["final_loss"])
        assert (runs / "pfb-pfh-seed-0.pyfu").is_file()
        log = [json.loads(line) for line in (runs / "pfb-pfh-seed-0.jsonl").read_text(encoding="utf-8").splitlines()]
        assert [record["step"] for record in log] == [1, 2]

        checkpoint = str(runs / "pfb-pfh-seed-0.pyfu")
        assert run_cli(["eval", checkpoint, "--config", config, "--render", str(tmp_path / "render")]) == EXIT_OK
        evaluated = last_json(capsys)
        assert evaluated["frames"] == 2
        assert 0.0 <= evaluated["miou"] <= 1.0
        assert len(evaluated["iou"]) == 6
        assert json.loads((runs / "pfb-pfh-seed-0-eval.json").read_text(encoding="utf-8")) == evaluated
        assert read_ppm(tmp_path / "render" / "000001.ppm").shape == (8, 64, 3)

        assert run_cli(["infer", checkpoint, "--config", config]) == EXIT_OK
        for frame_id in ("000000", "000001"):
            labels = read_labels(runs / "predictions" / f"{frame_id}.label")
            assert len(labels) == len(read_scan(tmp_path / "data" / "velodyne" / f"{frame_id}.bin"))
            assert set(np.unique(labels)) <= {*range(6), 255}

    def test_same_seed_same_training_log(self, tmp_path):
        data = (tmp_path / "data").as_posix()
        first = write_config(tmp_path, "first.toml", root=data, output=(tmp_path / "first").as_posix())
        second = write_config(tmp_path, "second.toml", root=data, output=(tmp_path / "second").as_posix())
        assert run_cli(["synth", "--config", str(first)]) == EXIT_OK
        assert run_cli(["train", "--config", str(first)]) == EXIT_OK
        assert run_cli(["train", "--config", str(second)]) == EXIT_OK
        name = "pfb-pfh-seed-0.jsonl"
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()

    def test_seed_flag_names_the_run(self, tmp_path, capsys):
        config = str(write_config(tmp_path))
        assert run_cli(["synth", "--config", config]) == EXIT_OK
        assert run_cli(["train", "--config", config, "--seed", "3", "--preset", "baseline", "--steps", "1"]) == EXIT_OK
        assert capsys.readouterr().out.strip().endswith("}")
        assert (tmp_path / "runs" / "baseline-seed-3.pyfu").is_file()

    @pytest.mark.slow
    def test_quick_selftest(self, capsys):
        assert run_cli(["selftest", "--quick"]) == EXIT_OK
        assert last_json(capsys)["passed"]
