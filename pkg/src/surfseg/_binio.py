"""Little-endian readers/writers shared by the LC* file formats."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedFileError, VersionError


class Reader:
    def __init__(self, buf: bytes, name: str = "<buffer>"):
        self.buf = buf
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.name}: truncated file (needed {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left)"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.buf[:len(expected)]
        if got != expected:
            raise BadMagicError(expected, bytes(got))
        self.pos = len(expected)

    def version(self, expected: int) -> None:
        got = self.u32()
        if got != expected:
            raise VersionError(expected, got)

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def u32(*values: int) -> bytes:
    return struct.pack("<" + "I" * len(values), *values)


def f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
