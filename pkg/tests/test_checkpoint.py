"""Tests for the checkpoint codec and state loading."""

from dataclasses import replace

import numpy as np
import pytest

from pyfu.checkpoint import (
    CONFIG_RECORD,
    config_from_records,
    config_record,
    decode_records,
    encode_records,
    load_state,
    network_state,
    read_checkpoint,
    save_checkpoint,
)
from pyfu.const import CHECKPOINT_MAGIC, PRESET_BASELINE
from pyfu.errors import PyFuDataError, PyFuShapeError
from pyfu.network import PyFuNetwork


class TestCodec:
    def test_records_survive_encoding(self, rng):
        records = {
            "weights": rng.normal(size=(2, 3, 4)).astype(np.float32),
            "stats": rng.normal(size=5),
            "index": np.arange(6, dtype=np.int64).reshape(2, 3),
            "bytes": np.frombuffer(b"abc", dtype=np.uint8),
            "scalar": np.array(1.5, dtype=np.float32),
        }
        decoded = decode_records(encode_records(records))
        assert list(decoded) == list(records)
        for name, value in records.items():
            assert decoded[name].dtype == value.dtype
            np.testing.assert_array_equal(decoded[name], value)

    def test_layout(self):
        payload = encode_records({"a": np.array([1.0], dtype=np.float32)})
        # magic, u16 name length, name, dtype code, rank, one u32 dim, one float32
        assert payload == CHECKPOINT_MAGIC + b"\x01\x00a\x00\x01\x01\x00\x00\x00" + np.float32(1.0).tobytes()

    def test_big_endian_arrays_are_stored_little_endian(self):
        value = np.array([1.0, 2.0], dtype=">f8")
        decoded = decode_records(encode_records({"x": value}))["x"]
        assert decoded.dtype == np.dtype("<f8")
        np.testing.assert_array_equal(decoded, value)

    def test_unsupported_dtype(self):
        with pytest.raises(PyFuDataError, match="unsupported dtype"):
            encode_records({"x": np.zeros(2, dtype=np.int16)})

    def test_bad_magic(self):
        with pytest.raises(PyFuDataError, match="magic"):
            decode_records(b"NOPE" + bytes(8))

    def test_truncated_payload(self):
        payload = encode_records({"x": np.zeros(4, dtype=np.float32)})
        with pytest.raises(PyFuDataError, match="truncated"):
            decode_records(payload[:-3])

    def test_unknown_dtype_code(self):
        payload = bytearray(encode_records({"x": np.zeros(1, dtype=np.float32)}))
        payload[len(CHECKPOINT_MAGIC) + 3] = 9
        with pytest.raises(PyFuDataError, match="dtype code 9"):
            decode_records(bytes(payload))


class TestNetworkState:
    def test_save_and_load(self, micro_config, tmp_path):
        source = PyFuNetwork(micro_config, 1)
        source.lidar.stem.norm.running_mean += 0.5
        save_checkpoint(tmp_path / "run.pyfu", source, micro_config)
        records = read_checkpoint(tmp_path / "run.pyfu")
        target = PyFuNetwork(config_from_records(records), 2)
        loaded = load_state(target, records)
        assert len(loaded) == len(network_state(source))
        for name, value in network_state(source).items():
            np.testing.assert_array_equal(network_state(target)[name], value)

    def test_config_round_trip(self, micro_config):
        config = replace(micro_config, late_fusion=True, pyramid_fusion=False, fusion_head=False)
        assert config_from_records({CONFIG_RECORD: config_record(config)}) == config

    def test_missing_config(self):
        with pytest.raises(PyFuDataError, match=CONFIG_RECORD):
            config_from_records({})

    def test_unreadable_config(self):
        with pytest.raises(PyFuDataError, match="unreadable"):
            config_from_records({CONFIG_RECORD: np.frombuffer(b"{not json", dtype=np.uint8)})

    def test_prefix_touches_only_that_subtree(self, micro_config):
        source = PyFuNetwork(micro_config, 1)
        target = PyFuNetwork(micro_config, 2)
        before = target.camera.stem.conv.weight.data.copy()
        loaded = load_state(target, network_state(source), prefix="lidar.")
        assert loaded
        assert all(name.startswith("lidar.") for name in loaded)
        np.testing.assert_array_equal(target.lidar.stem.conv.weight.data, source.lidar.stem.conv.weight.data)
        np.testing.assert_array_equal(target.camera.stem.conv.weight.data, before)

    def test_baseline_backbone_loads_into_a_fusion_network(self, micro_config):
        baseline = PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 1)
        fusion = PyFuNetwork(micro_config, 2)
        load_state(fusion, network_state(baseline), prefix="lidar.")
        for name, value in network_state(baseline).items():
            if name.startswith("lidar."):
                np.testing.assert_array_equal(network_state(fusion)[name], value)

    def test_strict_loading_needs_every_entry(self, micro_config):
        records = network_state(PyFuNetwork(micro_config.with_preset(PRESET_BASELINE), 1))
        with pytest.raises(PyFuDataError, match="lacks"):
            load_state(PyFuNetwork(micro_config, 2), records)
        assert load_state(PyFuNetwork(micro_config, 2), records, strict=False)

    def test_shape_mismatch(self, micro_config):
        records = network_state(PyFuNetwork(micro_config, 1))
        records["classifier.bias"] = np.zeros(2, dtype=np.float32)
        with pytest.raises(PyFuShapeError, match="classifier.bias"):
            load_state(PyFuNetwork(micro_config, 2), records)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PyFuDataError):
            read_checkpoint(tmp_path / "absent.pyfu")
