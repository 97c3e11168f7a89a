"""Binary PPM (P6, 8-bit) reading and writing for [3, H, W] float images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def to_bytes(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    if c != 3:
        raise FormatError(f"PPM needs 3 channels, got {c}")
    pix = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.transpose(1, 2, 0).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(image))


def _tokens(buf: bytes, count: int):
    """Split the first ``count`` whitespace tokens of a PPM header (skipping comments)."""
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        toks.append(buf[start:pos])
    return toks, pos + 1


def read_ppm(path) -> np.ndarray:
    """Return a float64 [3, H, W] image scaled to [0, 1]."""
    path = Path(path)
    try:
        buf = path.read_bytes()
        toks, offset = _tokens(buf, 4)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable PPM ({exc})") from exc
    if toks[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {toks[0]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header ({exc})") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: only 8-bit PPM images are supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=offset) if len(buf) - offset >= h * w * 3 else None
    if data is None:
        raise FormatError(f"{path}: pixel data truncated")
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
