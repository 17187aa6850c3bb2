"""Named-tensor checkpoint container.

Layout: magic, format version, a length-prefixed JSON header (sorted keys,
so identical content always serializes to identical bytes), then one record
per tensor: name, dtype tag, shape, and the raw little-endian payload.
Round-trips are bit-exact for both f32 and f64 payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCCT"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_TO_TAG = {"f": {4: 0, 8: 1}}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
                raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
            tag = _KIND_TO_TAG["f"][arr.dtype.itemsize]
            le = arr.astype(f"<f{arr.dtype.itemsize}", copy=False)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", tag))
            fh.write(struct.pack("<I", le.ndim))
            fh.write(struct.pack(f"<{le.ndim}Q", *le.shape))
            fh.write(le.tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def load_checkpoint(path, expect: dict | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; `expect` entries must match the header exactly and
    a mismatch is rejected naming the offending field."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            meta = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: corrupt header: {err}") from err
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (tag,) = struct.unpack("<B", _read_exact(fh, 1))
            if tag not in _TAG_TO_DTYPE:
                raise CheckpointError(f"{path}: tensor {name}: unknown dtype tag {tag}")
            dtype = _TAG_TO_DTYPE[tag]
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim)) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, n_items * dtype.itemsize)
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if expect:
        for key, want in expect.items():
            got = meta.get(key)
            if got != want:
                raise CheckpointError(f"{path}: header field {key!r} is {got!r}, expected {want!r}")
    return meta, tensors
