"""Little-endian binary helpers shared by the corpus and checkpoint formats."""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np


class FormatError(ValueError):
    """A file failed header or payload validation."""


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def u8(self, x: int) -> None:
        self.parts.append(struct.pack("<B", x))

    def u32(self, x: int) -> None:
        self.parts.append(struct.pack("<I", x))

    def u64(self, x: int) -> None:
        self.parts.append(struct.pack("<Q", x))

    def f64(self, x: float) -> None:
        self.parts.append(struct.pack("<d", x))

    def array(self, a: np.ndarray, dtype: str) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"payload truncated at byte {self.pos} (wanted {n} more)")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).astype(np.dtype(dtype))

    def done(self) -> bool:
        return self.pos == len(self.data)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
