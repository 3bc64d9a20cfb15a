"""Binary netpbm readers and writers (P6 color, P5 grayscale).

The dataset and visualization layers both sit on these two formats because
they are bit-exact and need no codec: a file is a short ASCII header followed
by the raw pixel payload. Writers emit the canonical header "P6\\n<w> <h>\\n255\\n"
so identical pixels always produce identical bytes.
"""

from .errors import DataError

import numpy as np


def write_ppm(image, path):
    """Write an (H, W, 3) uint8 array as a binary P6 file."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(image, path):
    """Write an (H, W) uint8 array as a binary P5 file."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) pixels, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def _parse_header(data, magic, path):
    # Header = magic, width, height, maxval as whitespace-separated tokens;
    # '#' starts a comment running to end of line. Token scanning is done by
    # hand because the payload is binary and must not pass through a decoder.
    if data[:2] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DataError(f"{path}: truncated header")
        token = data[start:pos]
        if not token.isdigit():
            raise DataError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    return w, h, pos


def read_ppm(path):
    """Read a binary P6 file into an (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, pos = _parse_header(data, b"P6", path)
    need = w * h * 3
    if len(data) - pos < need:
        raise DataError(f"{path}: payload truncated "
                        f"({len(data) - pos} of {need} bytes)")
    return np.frombuffer(data, np.uint8, need, pos).reshape(h, w, 3).copy()


def read_pgm(path):
    """Read a binary P5 file into an (H, W) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, pos = _parse_header(data, b"P5", path)
    need = w * h
    if len(data) - pos < need:
        raise DataError(f"{path}: payload truncated "
                        f"({len(data) - pos} of {need} bytes)")
    return np.frombuffer(data, np.uint8, need, pos).reshape(h, w).copy()
