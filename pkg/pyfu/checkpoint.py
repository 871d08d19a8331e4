"""PYFU1 checkpoint codec: named little-endian arrays after a magic header."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields
from typing import TYPE_CHECKING, Any

import numpy as np

from .const import CHECKPOINT_MAGIC, LOGGER
from .errors import PyFuDataError, PyFuShapeError
from .network import PyFuConfig

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping
    from pathlib import Path

    from .numcore import Module

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}
CONFIG_RECORD = "meta.config"
NAME_HEADER = struct.Struct("<H")
ARRAY_HEADER = struct.Struct("<BB")
DIM = struct.Struct("<I")


def encode_records(records: Mapping[str, np.ndarray]) -> bytes:
    """Serialize arrays in insertion order."""
    chunks = [CHECKPOINT_MAGIC]
    for name, value in records.items():
        array = np.asarray(value)
        dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
        if dtype not in DTYPE_CODES:
            msg = f"Record {name} has unsupported dtype {array.dtype}"
            raise PyFuDataError(msg)
        encoded = name.encode("utf-8")
        chunks.append(NAME_HEADER.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(ARRAY_HEADER.pack(DTYPE_CODES[dtype], array.ndim))
        chunks.extend(DIM.pack(dim) for dim in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(chunks)


def _take(payload: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    end = offset + size
    if end > len(payload):
        msg = f"Checkpoint truncated while reading {what} at byte {offset}"
        raise PyFuDataError(msg)
    return payload[offset:end], end


def decode_records(payload: bytes) -> dict[str, np.ndarray]:
    """Parse a PYFU1 byte string into named arrays."""
    if not payload.startswith(CHECKPOINT_MAGIC):
        msg = f"Not a checkpoint: expected magic {CHECKPOINT_MAGIC!r}, got {payload[:len(CHECKPOINT_MAGIC)]!r}"
        raise PyFuDataError(msg)
    records: dict[str, np.ndarray] = {}
    offset = len(CHECKPOINT_MAGIC)
    while offset < len(payload):
        raw, offset = _take(payload, offset, NAME_HEADER.size, "a name length")
        (length,) = NAME_HEADER.unpack(raw)
        raw, offset = _take(payload, offset, length, "a record name")
        name = raw.decode("utf-8")
        raw, offset = _take(payload, offset, ARRAY_HEADER.size, f"the header of {name}")
        code, rank = ARRAY_HEADER.unpack(raw)
        if code not in CODE_DTYPES:
            msg = f"Record {name} has unknown dtype code {code}"
            raise PyFuDataError(msg)
        raw, offset = _take(payload, offset, DIM.size * rank, f"the shape of {name}")
        shape = tuple(DIM.unpack_from(raw, DIM.size * axis)[0] for axis in range(rank))
        dtype = CODE_DTYPES[code]
        raw, offset = _take(payload, offset, int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, name)
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return records


def _named_modules(module: Module, prefix: str = "") -> Iterator[tuple[str, Module]]:
    yield prefix, module
    for name, child in module.children():
        yield from _named_modules(child, f"{prefix}{name}.")


def network_state(network: Module) -> dict[str, np.ndarray]:
    """Collect parameters and running statistics by dotted path."""
    state = {name: param.data for name, param in network.named_params()}
    state.update(network.named_buffers())
    return state


def config_record(config: PyFuConfig) -> np.ndarray:
    """Encode an architecture as a JSON byte record."""
    text = json.dumps(asdict(config), sort_keys=True)
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def _tupled(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupled(item) for item in value)
    return value


def config_from_records(records: Mapping[str, np.ndarray]) -> PyFuConfig:
    """Rebuild the architecture stored next to the weights."""
    if CONFIG_RECORD not in records:
        msg = f"Checkpoint has no {CONFIG_RECORD} record"
        raise PyFuDataError(msg)
    try:
        stored = json.loads(records[CONFIG_RECORD].tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exception:
        msg = f"Checkpoint configuration is unreadable: {exception}"
        raise PyFuDataError(msg) from exception
    known = {field.name for field in fields(PyFuConfig)}
    return PyFuConfig(**{key: _tupled(value) for key, value in stored.items() if key in known})


def save_checkpoint(path: Path, network: Module, config: PyFuConfig | None = None) -> None:
    """Write the network state (and optionally its architecture)."""
    records: dict[str, np.ndarray] = {}
    if config is not None:
        records[CONFIG_RECORD] = config_record(config)
    records.update(network_state(network))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(records))
    LOGGER.info("Checkpoint with %s records written to %s", len(records), path)


def read_checkpoint(path: Path) -> dict[str, np.ndarray]:
    """Read every record of a checkpoint file."""
    try:
        payload = path.read_bytes()
    except OSError as exception:
        msg = f"Cannot read checkpoint {path}: {exception}"
        raise PyFuDataError(msg) from exception
    return decode_records(payload)


def load_state(
    network: Module,
    records: Mapping[str, np.ndarray],
    *,
    prefix: str = "",
    strict: bool = True,
) -> list[str]:
    """
    Copy stored arrays into the network and return the loaded names.

    With a prefix only that subtree (e.g. ``lidar.``) is touched, which is
    how pretrained backbones are dropped into a fusion network. With
    ``strict`` every selected parameter and buffer must be present.
    """
    loaded = []
    missing = []
    for name, param in network.named_params():
        if not name.startswith(prefix):
            continue
        if name not in records:
            missing.append(name)
            continue
        value = records[name]
        if value.shape != param.shape:
            msg = f"Parameter {name} has shape {param.shape}, checkpoint has {value.shape}"
            raise PyFuShapeError(msg)
        param.tensor.data = value.astype(param.data.dtype)
        loaded.append(name)
    for module_prefix, module in _named_modules(network):
        for buffer, current in module.buffers().items():
            name = f"{module_prefix}{buffer}"
            if not name.startswith(prefix):
                continue
            if name not in records:
                missing.append(name)
                continue
            if records[name].shape != current.shape:
                msg = f"Buffer {name} has shape {current.shape}, checkpoint has {records[name].shape}"
                raise PyFuShapeError(msg)
            module.load_buffer(buffer, records[name].astype(current.dtype))
            loaded.append(name)
    if missing and strict:
        msg = f"Checkpoint lacks {len(missing)} entries, first {missing[0]}"
        raise PyFuDataError(msg)
    LOGGER.debug("Loaded %s entries under prefix %r (%s missing)", len(loaded), prefix, len(missing))
    return loaded
