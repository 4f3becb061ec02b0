"""``.sfck`` named-array container.

Layout::

    SFCK 1\\n
    <header byte length>\\n
    <UTF-8 JSON header: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}, ...]}>
    <raw little-endian array bytes, concatenated in header order>

Offsets are relative to the start of the data section.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SFCK"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def equals(self, other: Checkpoint) -> bool:
        """Bit-identical arrays and equal metadata."""
        if self.meta != other.meta or self.arrays.keys() != other.arrays.keys():
            return False
        return all(
            a.dtype == other.arrays[k].dtype and a.shape == other.arrays[k].shape
            and a.tobytes() == other.arrays[k].tobytes()
            for k, a in self.arrays.items()
        )


def _le(arr: np.ndarray) -> tuple[str, np.ndarray]:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        code = "<f4" if arr.dtype.itemsize == 4 else "<f8"
    elif arr.dtype.kind in "iub":
        code = "<i8"
    else:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code, np.asarray(arr, dtype=np.dtype(code), order="C")


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        code, arr = _le(ckpt.arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    try:
        header = json.dumps({"meta": ckpt.meta, "arrays": entries}, sort_keys=True,
                            separators=(",", ":"), allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"metadata is not serializable: {exc}") from None
    return b"%s %d\n%d\n" % (MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    try:
        line1, rest = buf.split(b"\n", 1)
        magic, version = line1.split(b" ")
        line2, rest = rest.split(b"\n", 1)
        hlen = int(line2)
    except ValueError:
        raise CheckpointError(f"{source}: not an .sfck file (bad preamble)") from None
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if int(version) != VERSION:
        raise CheckpointError(f"{source}: unsupported version {int(version)} (expected {VERSION})")
    if hlen > len(rest):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(rest[:hlen].decode("utf-8"))
        meta, entries = header["meta"], header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    data = rest[hlen:]
    arrays = {}
    for e in entries:
        try:
            name, code, shape, off, nb = e["name"], e["dtype"], tuple(e["shape"]), e["offset"], e["nbytes"]
        except (KeyError, TypeError):
            raise CheckpointError(f"{source}: malformed array entry {e!r}") from None
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: array {name!r} has unsupported dtype {code!r}")
        dt = np.dtype(code)
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nb != expected:
            raise CheckpointError(f"{source}: array {name!r} shape {shape} does not match {nb} bytes")
        if off < 0 or off + nb > len(data):
            raise CheckpointError(f"{source}: array {name!r} runs past end of file")
        arrays[name] = np.frombuffer(data, dtype=dt, count=expected // dt.itemsize, offset=off).reshape(shape).copy()
    return Checkpoint(meta, arrays)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write atomically; returns the SHA-256 of the bytes written."""
    path = Path(path)
    buf = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf)
    os.replace(tmp, path)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
