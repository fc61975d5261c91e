"""Binary Netpbm (P5/P6) reading and writing.

Only the binary variants are supported.  Samples are 8-bit for maxval 255
and 16-bit big-endian for maxval 65535; no other maxval is accepted.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np


class NetpbmError(ValueError):
    """Base class for parse errors; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(NetpbmError):
    pass


class BadMaxvalError(NetpbmError):
    pass


class HeaderError(NetpbmError):
    pass


class TruncatedError(NetpbmError):
    pass


_CHANNELS = {"P5": 1, "P6": 3}


@dataclass
class ImageFile:
    """A decoded Netpbm image.

    ``pixels`` is ``(height, width)`` for P5 and ``(height, width, 3)`` for
    P6, dtype uint8 or uint16 depending on ``maxval``.
    """

    magic: str
    width: int
    height: int
    maxval: int
    pixels: np.ndarray

    @property
    def channels(self) -> int:
        return _CHANNELS[self.magic]

    @property
    def bytes_per_sample(self) -> int:
        return 1 if self.maxval < 256 else 2

    @property
    def format(self) -> str:
        if self.magic == "P6":
            return "P6"
        return "P5-8bit" if self.maxval == 255 else "P5-16bit"

    def payload(self) -> bytes:
        dtype = ">u1" if self.maxval == 255 else ">u2"
        return np.ascontiguousarray(self.pixels, dtype=dtype).tobytes()

    def encode(self) -> bytes:
        header = f"{self.magic}\n{self.width} {self.height}\n{self.maxval}\n"
        return header.encode("ascii") + self.payload()


def from_array(pixels: np.ndarray, maxval: int | None = None) -> ImageFile:
    """Wrap a 2-D (gray) or 3-D RGB array as an ImageFile."""
    pixels = np.asarray(pixels)
    if maxval is None:
        maxval = 65535 if pixels.dtype == np.uint16 else 255
    if maxval not in (255, 65535):
        raise BadMaxvalError(f"maxval must be 255 or 65535, got {maxval}")
    if pixels.ndim == 2:
        magic = "P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = "P6"
    else:
        raise ValueError(f"cannot store array of shape {pixels.shape} as Netpbm")
    if magic == "P6" and maxval != 255:
        raise BadMaxvalError("only 8-bit P6 is supported")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValueError(f"sample values outside [0, {maxval}]")
    dtype = np.uint8 if maxval == 255 else np.uint16
    return ImageFile(magic, pixels.shape[1], pixels.shape[0], maxval, pixels.astype(dtype))


def _is_space(b: int) -> bool:
    return b in b" \t\r\n\v\f"


def decode(data: bytes) -> ImageFile:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"bad magic {data[:2]!r}, expected P5 or P6", 0)
    magic = data[:2].decode("ascii")
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between fields
        while pos < len(data):
            if _is_space(data[pos]):
                pos += 1
            elif data[pos] == ord("#"):
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= len(data):
                raise TruncatedError("header ends before all fields were read", pos)
            raise HeaderError(f"expected a decimal number, found {data[pos:pos + 1]!r}", pos)
        fields.append((int(data[start:pos]), start))
    if pos >= len(data) or not _is_space(data[pos]):
        raise HeaderError("missing single whitespace after maxval", pos)
    pos += 1
    (width, _), (height, _), (maxval, maxval_at) = fields
    if maxval not in (255, 65535):
        raise BadMaxvalError(f"maxval {maxval} is not 255 or 65535", maxval_at)
    channels = _CHANNELS[magic]
    bps = 1 if maxval == 255 else 2
    expected = width * height * channels * bps
    actual = len(data) - pos
    if actual < expected:
        raise TruncatedError(
            f"payload truncated: expected {expected} bytes, got {actual}", pos + actual)
    dtype = ">u1" if bps == 1 else ">u2"
    flat = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    pixels = flat.reshape(shape).astype(np.uint8 if bps == 1 else np.uint16)
    return ImageFile(magic, width, height, maxval, pixels)


def read_netpbm(path) -> ImageFile:
    with open(path, "rb") as fh:
        return decode(fh.read())


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_netpbm(path, image: ImageFile | np.ndarray, maxval: int | None = None) -> None:
    if not isinstance(image, ImageFile):
        image = from_array(image, maxval)
    atomic_write_bytes(path, image.encode())


def read_ppm(path) -> np.ndarray:
    img = read_netpbm(path)
    if img.magic != "P6":
        raise BadMagicError(f"{path}: expected P6, got {img.magic}", 0)
    return img.pixels


def read_pgm(path) -> np.ndarray:
    img = read_netpbm(path)
    if img.magic != "P5":
        raise BadMagicError(f"{path}: expected P5, got {img.magic}", 0)
    return img.pixels


def write_meta(path, items: dict) -> None:
    """Sidecar ``key = value`` text file."""
    text = "".join(f"{k} = {v}\n" for k, v in items.items())
    atomic_write_bytes(path, text.encode("utf-8"))


def read_meta(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
