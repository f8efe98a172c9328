"""Named parameter store and the binary weight-file format.

File layout (all little-endian):

    magic "MTWS" | version u16 | count u32
    per entry: name-length u16, UTF-8 name, dtype u8 (0=f32, 1=f64),
               rank u8, extents u32 x rank, payload offset u64
    payload-length u64 | raw values | CRC32 of payload u32

Entries are laid out in insertion order with non-overlapping offsets; the
CRC covers the payload only, so corruption of any stored value is detected
on load.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Tensor

MAGIC = b"MTWS"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class WeightStore:
    """Ordered mapping of parameter name to named Tensor.

    The store owns its tensors: `sgd_step` mutates them in place between
    tapes, and `astype` produces an independent copy for 64-bit checking.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(array, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_parameters(self) -> int:
        return sum(int(t.data.size) for t in self._params.values())

    def astype(self, dtype) -> "WeightStore":
        out = WeightStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def sgd_step(self, grads, lr: float) -> None:
        """In-place descent step; gradients looked up by parameter name."""
        for name, t in self._params.items():
            g = grads.by_name.get(name)
            if g is not None:
                t.data -= lr * g

    # -- file format --------------------------------------------------------

    def save(self, path) -> None:
        names = list(self._params)
        header = bytearray()
        header += MAGIC
        header += struct.pack("<HI", FORMAT_VERSION, len(names))
        payload = bytearray()
        for name in names:
            arr = self._params[name].data
            if arr.dtype not in _DTYPE_TAGS:
                raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            nb = name.encode("utf-8")
            header += struct.pack("<H", len(nb)) + nb
            header += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
            header += struct.pack(f"<{arr.ndim}I", *arr.shape)
            header += struct.pack("<Q", len(payload))
            payload += raw
        blob = bytes(header)
        blob += struct.pack("<Q", len(payload))
        blob += bytes(payload)
        blob += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
        with open(path, "wb") as f:
            f.write(blob)

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as f:
            blob = f.read()
        return cls.from_bytes(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WeightStore":
        view = memoryview(blob)
        if len(blob) < 10 or view[:4].tobytes() != MAGIC:
            raise FormatError("not a weight file: bad magic")
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported weight-format version {version}")
        pos = 10
        entries = []
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                name = view[pos : pos + nlen].tobytes().decode("utf-8")
                pos += nlen
                tag, rank = struct.unpack_from("<BB", blob, pos)
                pos += 2
                shape = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                (offset,) = struct.unpack_from("<Q", blob, pos)
                pos += 8
                entries.append((name, tag, shape, offset))
            (payload_len,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error as exc:
            raise FormatError(f"truncated weight file header: {exc}") from exc
        payload = view[pos : pos + payload_len]
        if len(payload) != payload_len or len(blob) < pos + payload_len + 4:
            raise FormatError("truncated weight file payload")
        (crc_stored,) = struct.unpack_from("<I", blob, pos + payload_len)
        if zlib.crc32(payload.tobytes()) & 0xFFFFFFFF != crc_stored:
            raise FormatError("weight payload CRC32 mismatch (corrupt file)")
        store = cls()
        seen: list[tuple[int, int]] = []
        for name, tag, shape, offset in entries:
            if tag not in _TAG_DTYPES:
                raise FormatError(f"unknown dtype tag {tag} for {name!r}")
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if offset + nbytes > payload_len:
                raise FormatError(f"entry {name!r} extends past payload end")
            for lo, hi in seen:
                if offset < hi and lo < offset + nbytes:
                    raise FormatError(f"entry {name!r} overlaps another entry")
            seen.append((offset, offset + nbytes))
            arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
            store.add(name, arr.reshape(shape).astype(dt.newbyteorder("=")))
        return store


# ---------------------------------------------------------------------------
# Initialization helpers shared by the model modules


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw truncated to two standard deviations (resampled)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def inv_softplus(y: np.ndarray) -> np.ndarray:
    """x such that softplus(x) = y, evaluated stably for small y."""
    return y + np.log(-np.expm1(-y))


def cast_struct(obj, dtype):
    """Deep-copy a parameter struct with every tensor cast to ``dtype``.

    Walks dataclasses, tuples and lists; non-tensor leaves pass through.
    """
    import dataclasses

    if isinstance(obj, Tensor):
        return Tensor(obj.data.astype(dtype), name=obj.name)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {
            f.name: cast_struct(getattr(obj, f.name), dtype)
            for f in dataclasses.fields(obj)
        }
        return type(obj)(**kwargs)
    if isinstance(obj, tuple):
        return tuple(cast_struct(v, dtype) for v in obj)
    if isinstance(obj, list):
        return [cast_struct(v, dtype) for v in obj]
    return obj


def iter_tensors(obj, prefix: str = ""):
    """Yield (dotted-path, Tensor) for every tensor inside a param struct."""
    import dataclasses

    if isinstance(obj, Tensor):
        yield prefix.rstrip("."), obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from iter_tensors(getattr(obj, f.name), prefix + f.name + ".")
    elif isinstance(obj, (tuple, list)):
        for i, v in enumerate(obj):
            yield from iter_tensors(v, f"{prefix}{i}.")
