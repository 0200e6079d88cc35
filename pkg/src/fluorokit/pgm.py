"""Binary PGM (P5) image I/O.

16-bit images use maxval 65535 with big-endian samples; masks use maxval 255
with values {0, 255}. Writes are byte-stable so files can serve as golden
fixtures and content-addressed artifacts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Write a 2D uint8 or uint16 array as binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError("PGM images must be 2D", field="image")
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    else:
        raise FormatError(f"unsupported PGM dtype {img.dtype}", field="dtype")
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload)
    return path


def write_mask_pgm(path: str | Path, mask: np.ndarray) -> Path:
    """Write a binary mask as 8-bit PGM with values {0, 255}."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * np.uint8(255)
    return write_pgm(path, m)


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM; returns uint8 (maxval <= 255) or uint16."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5)", field="magic")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    tokens: list[int] = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError(f"{path}: truncated PGM header", field="header")
        try:
            tokens.append(int(data[i:j]))
        except ValueError:
            raise FormatError(f"{path}: bad PGM header token {data[i:j]!r}", field="header")
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad PGM size {w}x{h}", field="size")
    if maxval <= 0 or maxval > 65535:
        raise FormatError(f"{path}: bad PGM maxval {maxval}", field="maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * dtype.itemsize
    payload = data[i : i + expected]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} != expected {expected}", field="payload"
        )
    img = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return img.astype(np.uint16) if maxval > 255 else img.copy()
