"""Binary PPM (P6) and PGM (P5) reading/writing, maxval 255 only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace byte after maxval


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        toks, pos = _tokens(buf, 4)
    except NetpbmError as e:
        raise NetpbmError(f"{path}: {e}") from None
    if toks[0] != magic:
        raise NetpbmError(f"{path}: expected {magic.decode()} file, got {toks[0][:2]!r}")
    try:
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError:
        raise NetpbmError(f"{path}: unparsable header") from None
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 supported, got {maxval}")
    n = w * h * channels
    data = buf[pos:pos + n]
    if len(data) != n:
        raise NetpbmError(f"{path}: truncated pixel data ({len(data)} of {n} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    """H×W×3 uint8."""
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """H×W uint8."""
    return _read(path, b"P5", 1)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_ppm expects H×W×3, got {image.shape}")
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm expects H×W, got {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
