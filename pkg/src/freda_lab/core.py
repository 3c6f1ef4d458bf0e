"""Numeric foundations: seeded RNG streams, the FRDA tensor container, checkpoints
and ``.npy`` import.

Tensors are plain C-ordered numpy arrays. Numerics run in float64 where
precision matters; the container stores float32 or uint8.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

MAGIC = b"FRDA"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
META_ARCH = "meta.arch"

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


class ContainerError(ValueError):
    """Raised for malformed, truncated or corrupted container files."""


@numba.njit(cache=True)
def _fnv1a_kernel(data, offset, prime):
    h = offset
    for b in data:
        h ^= numba.uint64(b)
        h *= prime
    return h


def fnv1a64(payload: bytes | np.ndarray) -> int:
    """64-bit FNV-1a hash of a byte buffer."""
    buf = np.frombuffer(payload, dtype=np.uint8) if isinstance(payload, (bytes, bytearray, memoryview)) else payload.reshape(-1).view(np.uint8)
    return int(_fnv1a_kernel(buf, _FNV_OFFSET, _FNV_PRIME))


# --------------------------------------------------------------------------- RNG


def _label_key(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


class Rng:
    """Seeded PCG64 generator with labelled, independent child streams.

    ``Rng(seed).child("augment:cluster-2")`` always yields the same stream for
    the same ``(seed, label path)``, regardless of what other streams were
    drawn from, so per-cluster work stays reproducible when reordered.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed % 2**64, spawn_key=_path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + _label_key(label))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)


# --------------------------------------------------------------------- container


def _encode(name: str, arr: np.ndarray) -> bytes:
    try:
        raw_name = name.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ValueError(f"tensor name must be ASCII: {name!r}") from exc
    if len(raw_name) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name[:32]!r}...")
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code, payload = DTYPE_U8, np.ascontiguousarray(arr)
    elif np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        code, payload = DTYPE_F32, np.ascontiguousarray(arr, dtype="<f4")
    else:
        raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    body = struct.pack("<H", len(raw_name)) + raw_name
    body += struct.pack("<BB", code, arr.ndim)
    body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    data = payload.tobytes()
    return body + data + struct.pack("<Q", fnv1a64(data))


def write_container(path: str | Path, tensors: dict[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> None:
    """Write named tensors to an FRDA container file.

    Floating arrays are stored as float32, uint8 arrays as uint8. Passing a
    list of pairs with a repeated name raises ``ValueError``.
    """
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"name collision: {dup}")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    chunks.extend(_encode(n, a) for n, a in items)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read every tensor of an FRDA container, verifying checksums."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("ascii")
        code, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        if code == DTYPE_F32:
            dtype = np.dtype("<f4")
        elif code == DTYPE_U8:
            dtype = np.dtype(np.uint8)
        else:
            raise ContainerError(f"unknown dtype code {code} for {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes)
        (checksum,) = r.unpack("<Q")
        if fnv1a64(data) != checksum:
            raise ContainerError(f"checksum mismatch for {name!r}")
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise ContainerError("trailing bytes after last tensor")
    return out


# -------------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    """Named parameter map plus the architecture it belongs to.

    ``params`` holds float32 arrays, including BatchNorm running statistics.
    """

    arch: str
    num_classes: int
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        meta = {"arch": self.arch, "num_classes": self.num_classes, **self.extra}
        meta_bytes = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        items = [(META_ARCH, meta_bytes)]
        items += [(k, np.asarray(v, dtype=np.float32)) for k, v in self.params.items()]
        write_container(path, items)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors = read_container(path)
        if META_ARCH not in tensors:
            raise ContainerError(f"{path}: not a checkpoint (missing {META_ARCH})")
        meta = json.loads(tensors.pop(META_ARCH).tobytes().decode("utf-8"))
        arch = meta.pop("arch")
        num_classes = int(meta.pop("num_classes"))
        return cls(arch=arch, num_classes=num_classes, params=tensors, extra=meta)


# ------------------------------------------------------------------------ npy


def npy_import(path: str | Path) -> np.ndarray:
    """Load a version 1.0, C-ordered ``.npy`` file of f32, f64 or u8 values.

    uint8 data is rescaled to ``[0, 1]``; floats are returned as float64.
    """
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
        except ValueError as exc:
            raise ValueError(f"malformed header: {exc}") from exc
        if version != (1, 0):
            raise ValueError(f"unsupported npy version {version}")
        try:
            shape, fortran_order, dtype = np.lib.format.read_array_header_1_0(fh)
        except ValueError as exc:
            raise ValueError(f"malformed header: {exc}") from exc
        if fortran_order:
            raise ValueError("unsupported layout: Fortran order")
        if dtype.base not in (np.dtype("<f4"), np.dtype("<f8"), np.dtype("u1"), np.dtype(">f4"), np.dtype(">f8")):
            raise ValueError(f"unsupported dtype {dtype}")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.fromfile(fh, dtype=dtype, count=count)
    if data.size != count:
        raise ValueError("malformed payload: fewer values than header shape")
    data = data.reshape(shape)
    if dtype == np.uint8:
        return data.astype(np.float64) / 255.0
    return data.astype(np.float64)
