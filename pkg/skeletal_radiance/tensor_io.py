"""
Named-tensor files (NHPT): little-endian binary used by trainer checkpoints

    b"NHPT" | u32 version | u32 count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | u8 precision | raw data
    optional trailer: u32 length | UTF-8 JSON text

Entries are written in sorted name order so equal contents give equal bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"NHPT"
VERSION = 1

_PRECISION_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_tensors(tensors: Mapping[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in _PRECISION_DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name} has rank {arr.ndim}")
        encoded_name = name.encode("utf-8")
        precision = arr.dtype.itemsize
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", precision))
        chunks.append(np.ascontiguousarray(arr, dtype=_PRECISION_DTYPES[precision]).tobytes())
    if metadata is not None:
        text = json.dumps(metadata, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(text)))
        chunks.append(text)
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def decode_tensors(data: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Optional[Dict[str, Any]]]:
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not an NHPT file (bad magic)")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported NHPT version {version}, expected {VERSION}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: tensor name is not valid UTF-8") from exc
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        (precision,) = reader.unpack("<B")
        if precision not in _PRECISION_DTYPES:
            raise CheckpointError(f"{source}: tensor {name} has unknown precision {precision}")
        dtype = _PRECISION_DTYPES[precision]
        size = int(np.prod(shape)) if shape else 1
        raw = reader.take(size * precision)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    metadata = None
    if reader.remaining:
        (length,) = reader.unpack("<I")
        try:
            metadata = json.loads(reader.take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{source}: corrupt metadata trailer") from exc
        if reader.remaining:
            raise CheckpointError(f"{source}: {reader.remaining} unexpected trailing bytes")
    return tensors, metadata


def save_tensors(path, tensors: Mapping[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors, metadata))
    logger.debug("wrote %d tensors to %s", len(tensors), path)
    return path


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], Optional[Dict[str, Any]]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_tensors(data, source=str(path))
