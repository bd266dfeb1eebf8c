"""safetensors container I/O with byte-exact round trips.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of JSON
(``name -> {dtype, shape, data_offsets}`` plus an optional
``__metadata__`` string map), then the data region. Offsets are relative to
the start of the data region.

Files are written canonically: JSON with sorted keys and no whitespace,
space-padded to a multiple of 8 bytes, tensors laid out contiguously in the
order they were read. Reading a canonical file and writing it back yields
the same bytes. Tensors are kept as raw payload bytes and only re-encoded
when a caller replaces their values.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointParseError, DTypeError, HeaderJSONError, HeaderLengthError, OffsetError, ShapeError

# bf16 has no numpy dtype; its payload is handled as raw uint16 bit patterns
STORAGE = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
}
ALIGNMENT = 8


def f64_to_bf16_bits(x) -> np.ndarray:
    """Round float64 values to bfloat16 (nearest, ties to even), returned as uint16 bits.

    Goes through float32 with round-to-odd, which carries enough sticky
    information for the final 16-bit rounding to be correct.
    """
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        f = x.astype(np.float32)
        back = f.astype(np.float64)
    inexact = np.isfinite(x) & (back != x)
    away = inexact & (np.abs(back) > np.abs(x))
    f = np.where(away, np.nextafter(f, np.float32(0.0)), f)
    bits = f.view(np.uint32).astype(np.uint64)
    bits[inexact] |= 1
    out = ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        out[nan] = ((f.view(np.uint32)[nan] >> 16) | 0x7FC0).astype(np.uint16)
    return out


def bf16_bits_to_f64(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return b.view(np.float32).astype(np.float64)


def encode(values, dtype: str) -> np.ndarray:
    """float64 values -> storage array for ``dtype`` (round to nearest even)."""
    values = np.asarray(values, dtype=np.float64)
    if dtype == "BF16":
        return f64_to_bf16_bits(values)
    try:
        target = STORAGE[dtype]
    except KeyError:
        raise DTypeError(f"unsupported dtype {dtype!r}") from None
    with np.errstate(over="ignore"):
        return values.astype(target)


def decode(storage: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "BF16":
        return bf16_bits_to_f64(storage)
    return np.asarray(storage, dtype=np.float64)


@dataclass
class TensorEntry:
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    def storage(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=STORAGE[self.dtype]).reshape(self.shape)

    def to_f64(self) -> np.ndarray:
        return decode(self.storage(), self.dtype)


@dataclass
class CheckpointFile:
    tensors: dict[str, TensorEntry] = field(default_factory=dict)
    metadata: dict[str, str] | None = None

    def __getitem__(self, name: str) -> TensorEntry:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def set_storage(self, name: str, storage: np.ndarray) -> None:
        entry = self.tensors[name]
        arr = np.ascontiguousarray(storage, dtype=STORAGE[entry.dtype])
        if arr.shape != entry.shape:
            raise ShapeError(f"{name}: new shape {arr.shape} != stored {entry.shape}")
        self.tensors[name] = TensorEntry(entry.dtype, entry.shape, arr.tobytes())

    def set_f64(self, name: str, values) -> None:
        self.set_storage(name, encode(values, self.tensors[name].dtype))

    def copy(self) -> CheckpointFile:
        return CheckpointFile(dict(self.tensors), None if self.metadata is None else dict(self.metadata))

    @classmethod
    def from_arrays(cls, arrays: dict[str, tuple[str, np.ndarray]], metadata: dict[str, str] | None = None):
        """Build from ``name -> (dtype, float values)``, encoding each value array."""
        cp = cls(metadata=metadata)
        for name, (dtype, values) in arrays.items():
            storage = encode(values, dtype)
            cp.tensors[name] = TensorEntry(dtype, tuple(storage.shape), storage.tobytes())
        return cp


def _as_shape(name: str, raw) -> tuple[int, ...]:
    if not isinstance(raw, list) or not all(isinstance(d, int) and d >= 0 for d in raw):
        raise HeaderJSONError(f"tensor {name!r}: shape must be a list of non-negative integers, got {raw!r}")
    return tuple(raw)


def parse_checkpoint(blob: bytes) -> CheckpointFile:
    if len(blob) < 8:
        raise HeaderLengthError(f"file is {len(blob)} bytes, too short for the header length field")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise HeaderLengthError(f"header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderJSONError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderJSONError("header must be a JSON object")
    data = memoryview(blob)[8 + n :]

    metadata = header.pop("__metadata__", None)
    if metadata is not None and not (
        isinstance(metadata, dict) and all(isinstance(k, str) and isinstance(v, str) for k, v in metadata.items())
    ):
        raise HeaderJSONError("__metadata__ must map strings to strings")

    spans = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise HeaderJSONError(f"tensor {name!r}: entry must be an object")
        dtype = info.get("dtype")
        if dtype not in STORAGE:
            raise DTypeError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        shape = _as_shape(name, info.get("shape"))
        offsets = info.get("data_offsets")
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(isinstance(o, int) for o in offsets)):
            raise HeaderJSONError(f"tensor {name!r}: data_offsets must be two integers, got {offsets!r}")
        begin, end = offsets
        if not 0 <= begin <= end <= len(data):
            raise OffsetError(f"tensor {name!r}: offsets [{begin}, {end}] out of bounds (data region {len(data)} bytes)")
        expected = math.prod(shape) * STORAGE[dtype].itemsize
        if end - begin != expected:
            raise OffsetError(f"tensor {name!r}: byte range holds {end - begin} bytes, shape needs {expected}")
        spans.append((begin, end, name, dtype, shape))

    spans.sort(key=lambda s: (s[0], s[1], s[2]))
    prev_end, prev_name = 0, None
    for begin, end, name, _, _ in spans:
        if begin < end:
            if begin < prev_end:
                raise OffsetError(f"tensor {name!r} overlaps tensor {prev_name!r}")
            prev_end, prev_name = end, name

    cp = CheckpointFile(metadata=metadata)
    for begin, end, name, dtype, shape in spans:
        cp.tensors[name] = TensorEntry(dtype, shape, bytes(data[begin:end]))
    return cp


def read_checkpoint(path) -> CheckpointFile:
    return parse_checkpoint(Path(path).read_bytes())


def serialize_checkpoint(cp: CheckpointFile) -> bytes:
    header: dict = {}
    offset = 0
    for name, entry in cp.tensors.items():
        if len(entry.data) != entry.numel * STORAGE[entry.dtype].itemsize:
            raise CheckpointParseError(f"tensor {name!r}: payload size does not match shape {entry.shape}")
        header[name] = {"dtype": entry.dtype, "shape": list(entry.shape), "data_offsets": [offset, offset + len(entry.data)]}
        offset += len(entry.data)
    if cp.metadata is not None:
        header["__metadata__"] = cp.metadata
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    text += b" " * (-len(text) % ALIGNMENT)
    return b"".join([struct.pack("<Q", len(text)), text, *(e.data for e in cp.tensors.values())])


def write_checkpoint(cp: CheckpointFile, path) -> None:
    """Serialize ``cp`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    blob = serialize_checkpoint(cp)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
