"""Binary container of named arrays.

Layout (little-endian)::

    magic     8 bytes  b"CLDMCKPT"
    version   u16
    count     u32
    count x { name_len u16, name utf-8, dtype u8, ndim u8, shape ndim x u64, payload }
    trailer   4 bytes  b"END!"

dtype tags: 0 = float64, 1 = int64, 2 = uint8. Names are written in sorted
order so that re-serialising a loaded checkpoint reproduces the same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CLDMCKPT"
TRAILER = b"END!"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_TAGS = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}


class CheckpointError(Exception):
    code = "format"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointFingerprintError(CheckpointError):
    code = "fingerprint"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict[str, np.ndarray] = field(default_factory=dict)
    fingerprint: str = ""
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"meta/step": np.array([self.step], dtype=np.int64),
               "meta/fingerprint": np.frombuffer(self.fingerprint.encode(), dtype=np.uint8)}
        for prefix, group in (("param/", self.params), ("opt/", self.optimizer),
                              ("stats/", self.stats), ("extra/", self.extra)):
            for k, v in group.items():
                out[prefix + k] = v
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Checkpoint":
        ck = cls()
        for name, arr in arrays.items():
            prefix, _, key = name.partition("/")
            if name == "meta/step":
                ck.step = int(arr[0])
            elif name == "meta/fingerprint":
                ck.fingerprint = arr.tobytes().decode()
            elif prefix == "param":
                ck.params[key] = arr
            elif prefix == "opt":
                ck.optimizer[key] = arr
            elif prefix == "stats":
                ck.stats[key] = arr
            elif prefix == "extra":
                ck.extra[key] = arr
            else:
                raise CheckpointError(f"unknown checkpoint entry {name!r}")
        return ck

    def equals(self, other: "Checkpoint") -> bool:
        a, b = self.to_arrays(), other.to_arrays()
        return a.keys() == b.keys() and all(
            a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
            and a[k].tobytes() == b[k].tobytes() for k in a)


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64) if arr.dtype.kind == "f" else arr.astype(np.int64)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(_DTYPES[_TAGS[arr.dtype]], copy=False).tobytes())
    parts.append(TRAILER)
    return b"".join(parts)


def decode_arrays(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(buf)} (needed {pos + n})")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if take(len(TRAILER)) != TRAILER:
        raise CheckpointError("missing checkpoint trailer")
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint")
    return arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_arrays(ckpt.to_arrays()))
    tmp.replace(path)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    ck = Checkpoint.from_arrays(decode_arrays(Path(path).read_bytes()))
    if expected_fingerprint is not None and ck.fingerprint != expected_fingerprint:
        raise CheckpointFingerprintError(
            f"checkpoint {path} was written for config {ck.fingerprint[:12]}, "
            f"current config is {expected_fingerprint[:12]}")
    return ck
