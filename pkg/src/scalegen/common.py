"""Shared plumbing: error types, named RNG substreams, atomic file IO."""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np


class InvalidArgument(ValueError):
    """A caller-supplied value violates an operation's contract."""


class InvalidState(RuntimeError):
    """An operation was invoked in a state it cannot handle."""


class NumericFailure(ArithmeticError):
    """A non-finite value surfaced where finite math is required."""


# Every source of randomness in the repo derives from one root seed through
# one of these named substreams, so each stage is auditable in isolation.
_STREAM_IDS = {
    "data": 0,
    "init": 1,
    "mask": 2,
    "sample": 3,
    "drop": 4,
    "bench": 5,
    "verify": 6,
    "test": 7,
}


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Deterministic RNG stream derived from (root seed, stream name, index)."""
    if name not in _STREAM_IDS:
        raise InvalidArgument(f"unknown rng stream {name!r}")
    ss = np.random.SeedSequence(seed, spawn_key=(_STREAM_IDS[name], index))
    return np.random.Generator(np.random.PCG64(ss))


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via temp file + rename so concurrent readers never see partials."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ByteReader:
    """Sequential little-endian reader over an in-memory buffer."""

    def __init__(self, data: bytes):
        self._buf = data
        self._off = 0

    def take(self, n: int) -> bytes:
        if self._off + n > len(self._buf):
            raise InvalidArgument("truncated file: unexpected end of data")
        out = self._buf[self._off : self._off + n]
        self._off += n
        return out

    def magic(self, expected: bytes, what: str) -> None:
        found = self.take(4)
        if found != expected:
            raise InvalidArgument(
                f"bad {what} file: expected magic {expected!r}, found {found!r}"
            )

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).copy()

    @property
    def exhausted(self) -> bool:
        return self._off == len(self._buf)


def pack_u32(*vals: int) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)
