"""Safetensors reading (and fixture writing).

Layout of one file: an unsigned little-endian 64-bit header length ``N``,
``N`` bytes of UTF-8 JSON mapping tensor names to dtype/shape/offsets, then
the data section. Offsets are relative to the start of the data section.
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    DuplicateTensorError,
    NonFiniteError,
    PreconditionError,
)

DTYPE_SIZES = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}

# Anything larger is certainly not a header; protects against reading garbage lengths.
MAX_HEADER_BYTES = 100 * 1024 * 1024


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]
    file: str
    data_start: int = 0  # absolute offset of the data section in ``file``

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def is_matrix(self) -> bool:
        return len(self.shape) == 2


@dataclass(frozen=True, eq=False)
class TensorMatrix:
    """A dense float64 matrix plus where it came from.

    ``values`` is marked read-only so a matrix can be shared between workers.
    """

    values: np.ndarray
    source: TensorMeta | None = None
    name: str = ""

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {self.values.shape}")
        if not self.name and self.source is not None:
            object.__setattr__(self, "name", self.source.name)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class CheckpointIndex(Mapping):
    """Immutable name -> TensorMeta map merged across shards."""

    def __init__(self, metas: Iterable[TensorMeta]):
        entries: dict[str, TensorMeta] = {}
        for meta in metas:
            if meta.name in entries:
                raise DuplicateTensorError(
                    f"tensor {meta.name!r} appears in both {entries[meta.name].file} and {meta.file}"
                )
            entries[meta.name] = meta
        self._entries = entries

    def __getitem__(self, name: str) -> TensorMeta:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"CheckpointIndex({len(self)} tensors)"

    @property
    def files(self) -> list[str]:
        return sorted({m.file for m in self._entries.values()})


def read_header(path: str | os.PathLike) -> list[TensorMeta]:
    path = Path(path)
    file_size = path.stat().st_size
    with path.open("rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError(f"{path}: file shorter than the 8-byte header length")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > MAX_HEADER_BYTES or 8 + header_len > file_size:
            raise CheckpointFormatError(
                f"{path}: header length {header_len} exceeds file size {file_size}"
            )
        raw = fh.read(header_len)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: invalid JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header is not a JSON object")

    data_start = 8 + header_len
    data_len = file_size - data_start
    metas = []
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        metas.append(_parse_entry(path, name, entry, data_start, data_len))

    spans = sorted((m.byte_range, m.name) for m in metas if m.byte_range[1] > m.byte_range[0])
    for (prev, prev_name), (cur, cur_name) in zip(spans, spans[1:]):
        if cur[0] < prev[1]:
            raise CheckpointFormatError(
                f"{path}: byte ranges of {prev_name!r} {list(prev)} and {cur_name!r} {list(cur)} overlap"
            )
    return metas


def _parse_entry(path: Path, name: str, entry, data_start: int, data_len: int) -> TensorMeta:
    where = f"{path}: tensor {name!r}"
    if not isinstance(entry, dict):
        raise CheckpointFormatError(f"{where}: entry is not an object")
    dtype = entry.get("dtype")
    if dtype not in DTYPE_SIZES:
        raise CheckpointFormatError(f"{where}: unsupported dtype {dtype!r}")
    shape = entry.get("shape")
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
    ):
        raise CheckpointFormatError(f"{where}: invalid shape {shape!r}")
    offsets = entry.get("data_offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
    ):
        raise CheckpointFormatError(f"{where}: invalid data_offsets {offsets!r}")
    begin, end = offsets
    if not 0 <= begin <= end:
        raise CheckpointFormatError(f"{where}: invalid data_offsets {offsets!r}")
    if end > data_len:
        raise CheckpointFormatError(
            f"{where}: data_offsets end {end} exceeds data section length {data_len}"
        )
    expected = math.prod(shape) * DTYPE_SIZES[dtype]
    if end - begin != expected:
        raise CheckpointFormatError(
            f"{where}: byte span {end - begin} does not match shape {shape} x {dtype} ({expected} bytes)"
        )
    return TensorMeta(name, dtype, tuple(shape), (begin, end), str(path), data_start)


def open_checkpoint(paths: Iterable[str | os.PathLike]) -> CheckpointIndex:
    """Index every tensor in every shard. Duplicate names across shards are an error."""
    paths = list(paths)
    if not paths:
        raise CheckpointFormatError("no checkpoint files given")
    metas: list[TensorMeta] = []
    for p in paths:
        metas.extend(read_header(p))
    return CheckpointIndex(metas)


def discover_files(inputs: Iterable[str | os.PathLike]) -> list[Path]:
    """Expand directories to their ``*.safetensors`` files (sorted); keep files as given."""
    found: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            shards = sorted(p.glob("*.safetensors"))
            if not shards:
                raise CheckpointFormatError(f"{p}: no .safetensors files in directory")
            found.extend(shards)
        elif p.is_file():
            found.append(p)
        else:
            raise CheckpointFormatError(f"{p}: no such file or directory")
    return found


def decode_bf16(bits: np.ndarray) -> np.ndarray:
    """bfloat16 is the top half of an IEEE float32."""
    return (bits.astype(np.uint32) << 16).view(np.float32)


def decode_buffer(buf: bytes, dtype: str) -> np.ndarray:
    if dtype == "F64":
        return np.frombuffer(buf, dtype="<f8").astype(np.float64)
    if dtype == "F32":
        return np.frombuffer(buf, dtype="<f4").astype(np.float64)
    if dtype == "F16":
        return np.frombuffer(buf, dtype="<f2").astype(np.float64)
    if dtype == "BF16":
        return decode_bf16(np.frombuffer(buf, dtype="<u2")).astype(np.float64)
    raise CheckpointFormatError(f"unsupported dtype {dtype!r}")


def read_tensor(meta: TensorMeta) -> np.ndarray:
    """Read one tensor as a flat float64 array (no finiteness check)."""
    begin, end = meta.byte_range
    with open(meta.file, "rb") as fh:
        fh.seek(meta.data_start + begin)
        buf = fh.read(end - begin)
    if len(buf) != end - begin:
        raise CheckpointFormatError(f"{meta.file}: short read for tensor {meta.name!r}")
    return decode_buffer(buf, meta.dtype)


def load_matrix(index: Mapping[str, TensorMeta], name: str) -> TensorMatrix:
    try:
        meta = index[name]
    except KeyError:
        raise CheckpointFormatError(f"tensor {name!r} not found in checkpoint") from None
    if not meta.is_matrix:
        raise PreconditionError(f"tensor {name!r} has shape {list(meta.shape)}, expected 2-D")
    flat = read_tensor(meta)
    bad = ~np.isfinite(flat)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteError(name, i, float(flat[i]))
    values = flat.reshape(meta.shape)
    values.setflags(write=False)
    return TensorMatrix(values, meta)


def encode_bf16(values: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 bit patterns (round-to-nearest-even)."""
    bits = np.asarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = bits + 0x7FFF + ((bits >> 16) & 1)
    return (rounded >> 16).astype(np.uint16)


_ENCODERS = {
    "F64": lambda a: np.asarray(a, dtype="<f8"),
    "F32": lambda a: np.asarray(a, dtype="<f4"),
    "F16": lambda a: np.asarray(a, dtype="<f2"),
}


def save_checkpoint(
    path: str | os.PathLike,
    tensors: Mapping[str, np.ndarray],
    dtype: str = "F32",
    metadata: Mapping[str, str] | None = None,
) -> Path:
    """Write a safetensors file. Meant for fixtures and tests.

    ``dtype`` applies to every tensor. For BF16, ``uint16`` arrays are taken as
    raw bit patterns; float arrays are rounded.
    """
    if dtype not in DTYPE_SIZES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header: dict = {}
    if metadata:
        header["__metadata__"] = dict(metadata)
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if dtype == "BF16":
            data = arr.astype("<u2") if arr.dtype == np.uint16 else encode_bf16(arr)
        else:
            data = _ENCODERS[dtype](arr)
        raw = np.ascontiguousarray(data).tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    return path
