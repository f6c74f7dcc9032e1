"""
Binary container shared by model checkpoints and dataset blobs.

Layout: magic ``TRL3D\\0``, format version (u32), then until end of file one
record per named array: name length (u32), UTF-8 name, rank (u32), extents
(u64 each), little-endian float64 payload.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .exceptions import CheckpointError
from .nn import Module

logger = logging.getLogger(__name__)

MAGIC = b"TRL3D\x00"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def encode_container(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        values = np.asarray(array, dtype="<f8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(np.ascontiguousarray(values).tobytes())
    return b"".join(chunks)


def decode_container(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a TRL3D container (bad magic)")
    offset = len(MAGIC)
    if len(payload) < offset + 4:
        raise CheckpointError("corrupt payload: missing format version")
    (version,) = struct.unpack_from("<I", payload, offset)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
    offset += 4

    arrays: Dict[str, np.ndarray] = {}
    try:
        while offset < len(payload):
            (name_length,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name_bytes = payload[offset : offset + name_length]
            if len(name_bytes) != name_length:
                raise CheckpointError("corrupt payload: truncated name")
            name = name_bytes.decode("utf-8")
            offset += name_length
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            if offset + 8 * rank > len(payload):
                raise CheckpointError(f"corrupt payload: array {name!r} has a truncated shape")
            shape = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            # Python ints, checked against the bytes left after every factor
            available = (len(payload) - offset) // 8
            count = 1
            for extent in shape:
                count *= extent
                if count > available:
                    raise CheckpointError(f"corrupt payload: array {name!r} is truncated")
            end = offset + 8 * count
            arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset = end
    except struct.error as e:
        raise CheckpointError(f"corrupt payload: {e}") from e
    except UnicodeDecodeError as e:
        raise CheckpointError("corrupt payload: array name is not UTF-8") from e
    except ValueError as e:
        raise CheckpointError(f"corrupt payload: {e}") from e
    return arrays


def write_container(path: PathLike, arrays: Mapping[str, np.ndarray]) -> str:
    """Write arrays to ``path`` and return the sha256 of the bytes written."""
    payload = encode_container(arrays)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)
    logger.info(f"Wrote {len(arrays)} arrays to {path}")
    return hashlib.sha256(payload).hexdigest()


def read_container(path: PathLike) -> Dict[str, np.ndarray]:
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"no such file: {path}") from e
    return decode_container(payload)


def save_checkpoint(path: PathLike, model: Module) -> str:
    return write_container(path, {name: p.data for name, p in model.named_parameters()})


def load_checkpoint(path: PathLike, model: Module) -> None:
    """Copy stored arrays into ``model``; names and shapes must match exactly."""
    stored = read_container(path)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint {path} does not fit the model: missing {missing[:3]}, unexpected {unexpected[:3]}"
        )
    for name, param in expected.items():
        if stored[name].shape != param.shape:
            raise CheckpointError(
                f"checkpoint {path}: {name} has shape {stored[name].shape}, model expects {param.shape}"
            )
    for name, param in expected.items():
        param.data = stored[name].copy()
        param.grad = None
    logger.info(f"Loaded {len(expected)} parameters from {path}")
