"""Minimal binary PGM (P5, 8-bit) reader/writer."""

import numpy as np


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255 or not np.all(img == np.round(img)):
            raise ValueError("PGM pixels must be integers in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def _tokens(data):
    """Yield (token, end_offset) for header fields, skipping ``#`` comments."""
    i, n = 0, len(data)
    while i < n:
        c = data[i:i + 1]
        if c == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            yield data[i:j], j
            i = j


def read_pgm(path):
    """Return the image as a ``uint8`` array of shape (height, width)."""
    with open(path, "rb") as fh:
        data = fh.read()
    toks = _tokens(data)
    try:
        magic, _ = next(toks)
        width, _ = next(toks)
        height, _ = next(toks)
        maxval, end = next(toks)
    except StopIteration:
        raise ValueError(f"{path}: truncated PGM header") from None
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, mv = int(width), int(height), int(maxval)
    if mv != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {mv}")
    # exactly one whitespace byte separates the header from the raster
    raster = data[end + 1:end + 1 + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
