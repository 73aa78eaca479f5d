"""Bit-exact 8-bit binary PGM (P5) image I/O."""

from __future__ import annotations

import numpy as np


class PGMParseError(ValueError):
    """Malformed PGM data; the message carries the byte offset of the fault."""


def write_pgm(image) -> bytes:
    """Serialize a [0,1] grayscale image as binary PGM, rounding half-up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if np.any(img < 0.0) or np.any(img > 1.0) or not np.all(np.isfinite(img)):
        raise ValueError("pixels must lie in [0, 1]")
    q = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PGMParseError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pgm(data: bytes) -> np.ndarray:
    """Parse binary PGM bytes back to a [0,1] float image."""
    if data[:2] != b"P5":
        raise PGMParseError(f"missing P5 magic at byte 0, got {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _next_token(data, pos)
        if not token.isdigit():
            raise PGMParseError(f"expected integer at byte {pos - len(token)}, got {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise PGMParseError(f"invalid dimensions {w}x{h} in header ending at byte {pos}")
    if maxval != 255:
        raise PGMParseError(f"unsupported maxval {maxval} at byte {pos}; only 255")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PGMParseError(f"expected single whitespace after maxval at byte {pos}")
    pos += 1
    payload = data[pos : pos + w * h]
    if len(payload) != w * h:
        raise PGMParseError(
            f"truncated payload at byte {pos + len(payload)}: need {w * h} bytes, have {len(payload)}"
        )
    q = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return q.astype(np.float64) / 255.0
