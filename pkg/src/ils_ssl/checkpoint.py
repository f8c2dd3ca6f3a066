"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes  b"ILSCKPT\\0"
    version   u32
    fprint    32 bytes sha256 of the canonical pipeline config
    step      u64
    meta      u32 length + UTF-8 JSON (sorted keys)
    n         u32 tensor count
    n times:  u16 name length, name, u8 dtype code, u8 ndim, u32 dims, raw data

dtype code 0 is float32 and 1 is float64.  Parameters are written as float64
by default so that an interrupted run resumes exactly; ``dtype="float32"``
gives the compact portable form.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ILSCKPT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"float32": 0, "float64": 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    dtypes: dict[str, str] = field(default_factory=dict)

    def params(self, prefix: str = "param/") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint, dtype: str = "float64") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    fp = bytes.fromhex(ckpt.fingerprint)
    if len(fp) != 32:
        raise CheckpointError("fingerprint must be a sha256 hex digest")
    buf.write(fp)
    buf.write(struct.pack("<Q", ckpt.step))
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in ckpt.tensors:
        arr = np.asarray(ckpt.tensors[name])
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} has non-finite values")
        code = _CODES[ckpt.dtypes.get(name, dtype)]
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    fp = data[pos:pos + 32].hex()
    pos += 32
    (step,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + mlen].decode())
    pos += mlen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors, dtypes = {}, {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode()
        pos += klen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape)
        pos += count * dt.itemsize
        tensors[name] = arr.astype(np.float64)
        dtypes[name] = "float32" if code == 0 else "float64"
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after tensor table")
    return Checkpoint(fp, step, meta, tensors, dtypes)


def save(ckpt: Checkpoint, path, dtype: str = "float64") -> None:
    path = Path(path)
    if not path.parent.exists():
        raise CheckpointError(f"directory {path.parent} does not exist")
    path.write_bytes(to_bytes(ckpt, dtype))


def load(path, expected_fingerprint: str | None = None, force: bool = False) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    ckpt = from_bytes(data)
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint and not force:
        raise CheckpointError(
            f"{path}: config fingerprint {ckpt.fingerprint[:12]} does not match "
            f"current config {expected_fingerprint[:12]}; pass --force to load anyway")
    return ckpt


def model_tensors(model, optimizer=None) -> dict[str, np.ndarray]:
    out = {f"param/{k}": p.data for k, p in model.named_parameters()}
    if optimizer is not None:
        out.update(optimizer.state())
    return out


def load_into(model, ckpt: Checkpoint, strict: bool = True) -> None:
    """Copy ``param/*`` tensors into ``model``; the first shape mismatch is an error."""
    stored = ckpt.params()
    named = dict(model.named_parameters())
    for name, p in named.items():
        if name not in stored:
            if strict:
                raise CheckpointError(f"checkpoint is missing tensor {name}")
            continue
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for tensor {name}: checkpoint {stored[name].shape} vs model {p.data.shape}")
    if strict:
        extra = sorted(set(stored) - set(named))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]}")
    for name, p in named.items():
        if name in stored:
            p.data = np.array(stored[name], dtype=np.float64)
