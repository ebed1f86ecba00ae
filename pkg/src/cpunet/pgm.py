"""Netpbm greyscale (PGM) codec, binary P5 and ASCII P2."""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError


class PgmError(DataError):
    def __init__(self, message: str, offset: int, source: str = "<bytes>"):
        super().__init__(f"{source}: {message} at byte offset {offset}")
        self.offset = offset


def _tokens(buf: bytes, pos: int, count: int, source: str):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmError("unexpected end of header", pos, source)
        tok = buf[start:pos]
        if not tok.isdigit():
            raise PgmError(f"expected an integer, found {tok[:16]!r}", start, source)
        out.append(int(tok))
    return out, pos


def decode_pgm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode PGM bytes into a uint8 (maxval < 256) or uint16 array ``[h, w]``."""
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise PgmError(f"bad magic {magic!r}", 0, source)
    (w, h, maxval), pos = _tokens(buf, 2, 3, source)
    if w < 1 or h < 1:
        raise PgmError(f"bad dimensions {w}x{h}", pos, source)
    if not 0 < maxval < 65536:
        raise PgmError(f"bad maxval {maxval}", pos, source)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    if magic == b"P2":
        values, _ = _tokens(buf, pos, w * h, source)
        arr = np.array(values, dtype=np.int64)
    else:
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise PgmError("missing whitespace after maxval", pos, source)
        pos += 1
        nbytes = w * h * np.dtype(dtype).itemsize
        if len(buf) - pos < nbytes:
            raise PgmError(f"truncated raster: need {nbytes} bytes, have {len(buf) - pos}", pos, source)
        arr = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).astype(np.int64)
    if arr.max(initial=0) > maxval:
        raise PgmError(f"sample exceeds maxval {maxval}", pos, source)
    out_dtype = np.uint8 if maxval < 256 else np.uint16
    return arr.astype(out_dtype).reshape(h, w)


def encode_pgm(pixels: np.ndarray, ascii: bool = False) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.dtype.kind not in "ui" or arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise ValueError("PGM pixels must be integers in [0, 65535]")
    maxval = 255 if arr.max(initial=0) <= 255 else 65535
    h, w = arr.shape
    header = f"{'P2' if ascii else 'P5'}\n{w} {h}\n{maxval}\n".encode()
    if ascii:
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in arr).encode() + b"\n"
    else:
        body = arr.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    return header + body


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), os.fspath(path))


def write_pgm(path, pixels: np.ndarray, ascii: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(pixels, ascii))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0
