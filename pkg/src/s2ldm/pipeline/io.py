"""S2T1 tensor containers and PGM images.

S2T1 layout (little-endian): b"S2T1", u32 version (=1), u32 entry count,
then per entry: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64, 2=i64),
u8 ndim, ndim x u64 dims, raw payload. Zero-dimensional entries carry
scalar metadata; the stage tag is stored as the integer entry ``stage``.
"""
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import CorruptCheckpointError, UnsupportedVersionError

MAGIC = b"S2T1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
STAGES = {"ae": 0, "diff": 1, "sample": 2, "pred": 3}


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def stage(self):
        return self.metadata.get("stage")


def _dtype_code(arr):
    if arr.dtype == np.float32:
        return 0
    if arr.dtype == np.float64:
        return 1
    if arr.dtype.kind in "iub":
        return 2
    raise ValueError(f"unsupported dtype {arr.dtype}")


def _encode_entry(name, arr):
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    arr = np.asarray(arr, dtype=DTYPES[code], order="C")  # keeps 0-d shape
    raw_name = name.encode("utf-8")
    if len(raw_name) > 0xFFFF:
        raise ValueError(f"entry name too long: {name[:40]}...")
    if arr.ndim > 0xFF:
        raise ValueError(f"too many dims for {name}")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(tensors, metadata=None):
    entries = dict(tensors)
    for key, value in (metadata or {}).items():
        if key in entries:
            raise ValueError(f"metadata key {key!r} collides with a tensor")
        if key == "stage":
            if value not in STAGES:
                raise ValueError(f"unknown stage tag {value!r}")
            value = STAGES[value]
        if isinstance(value, (bool, np.bool_, int, np.integer)):
            entries[key] = np.array(int(value), dtype=np.int64)
        elif isinstance(value, (float, np.floating)):
            entries[key] = np.array(float(value), dtype=np.float64)
        else:
            raise ValueError(f"metadata {key!r} must be a number, got {type(value).__name__}")
    for key, arr in tensors.items():
        if np.ndim(arr) == 0:
            raise ValueError(f"tensor {key!r} must have at least one dimension")
    body = b"".join(_encode_entry(name, arr) for name, arr in entries.items())
    return MAGIC + struct.pack("<II", VERSION, len(entries)) + body


def save_checkpoint(path, tensors, metadata=None):
    data = dumps(tensors, metadata)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def loads(data):
    """Parse and fully validate an S2T1 byte string before building arrays."""
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError(what, f"truncated (need {n} bytes at offset {pos})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CorruptCheckpointError("magic", "not an S2T1 container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError("version", f"unsupported version {version}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    specs = []
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = bytes(take(name_len, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"entry {i} name", "invalid UTF-8") from exc
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in DTYPES:
            raise CorruptCheckpointError(f"{name} dtype", f"unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} dims"))
        count_items = int(np.prod(dims, dtype=object)) if ndim else 1
        offset = pos
        take(count_items * DTYPES[code].itemsize, f"{name} payload")
        if name in (s[0] for s in specs):
            raise CorruptCheckpointError(f"{name}", "duplicate entry")
        specs.append((name, code, dims, offset, count_items))
    if pos != len(view):
        raise CorruptCheckpointError("trailer", f"{len(view) - pos} unexpected trailing bytes")

    tensors, metadata = {}, {}
    for name, code, dims, offset, n in specs:
        arr = np.frombuffer(data, dtype=DTYPES[code], count=n, offset=offset).reshape(dims).copy()
        if len(dims) == 0:
            value = arr.item()
            if name == "stage":
                inv = {v: k for k, v in STAGES.items()}
                if value not in inv:
                    raise CorruptCheckpointError("stage", f"unknown stage code {value}")
                value = inv[value]
            metadata[name] = value
        else:
            tensors[name] = arr
    return Checkpoint(tensors, metadata, version)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def pgm_bytes(values):
    """Binary P5 PGM mapping -1 -> 0 and +1 -> 255, rounding half up."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or values.min() < -1.0 or values.max() > 1.0:
        raise ValueError("PGM values must lie in [-1, 1]")
    levels = np.floor((values + 1.0) / 2.0 * 255.0 + 0.5).astype(np.uint8)
    h, w = values.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes()


def emit_pgm(values, path):
    data = pgm_bytes(values)
    with open(path, "wb") as fh:
        fh.write(data)
    return path
