"""Pixel curve -> stripe image -> model input.

The time axis runs down the rows: row ``n`` of a stripe image holds the
curve value at (subsampled) frame ``n`` replicated across every column.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateFit, NotDivisible, TooShort
from .heatsim import PixelCurve, round_half_away


@dataclass(frozen=True)
class StripeImage:
    pixels: np.ndarray  # N x N grey levels
    source_label: float | None = None

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PipelineOptions:
    stride: int = 10
    target_len: int = 1024
    smooth_window: int = 5
    poly_degree: int = 5
    enhance: bool = True
    input_size: int = 64


def subsample(raw: PixelCurve, stride: int = 10, target_len: int = 1024) -> PixelCurve:
    """Every ``stride``-th frame from frame 0, truncated to ``target_len``."""
    if stride < 1 or target_len < 1:
        raise ValueError("stride and target_len must be positive")
    available = len(raw) // stride
    if available < target_len:
        raise TooShort(
            f"curve of {len(raw)} frames yields {available} samples at stride {stride}, "
            f"need {target_len}"
        )
    picked = raw.values[::stride][:target_len]
    return replace(raw, values=picked, frame_rate=raw.frame_rate / stride)


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average; edge frames average over the truncated window."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd number, got {window}")
    v = np.asarray(values, dtype=float)
    half = window // 2
    csum = np.concatenate(([0.0], np.cumsum(v)))
    idx = np.arange(len(v))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(v))
    return (csum[hi] - csum[lo]) / (hi - lo)


def fit_log_time_polynomial(values: np.ndarray, degree: int) -> np.ndarray:
    """Least-squares polynomial in ``log(1 + frame index)``; returns fitted values."""
    y = np.asarray(values, dtype=float)
    n = len(y)
    if degree < 0 or degree >= n:
        raise DegenerateFit(f"degree {degree} needs more than {n} samples")
    x = np.log1p(np.arange(n, dtype=float))
    # map onto [-1, 1] before building the Vandermonde matrix
    span = x[-1] - x[0]
    t = 2.0 * (x - x[0]) / span - 1.0 if span > 0 else np.zeros_like(x)
    basis = np.vander(t, degree + 1, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(basis, y, rcond=None)
    if rank < degree + 1:
        raise DegenerateFit(f"rank-deficient fit (rank {rank} < {degree + 1})")
    return basis @ coef


def smooth(curve: PixelCurve, window: int = 5, degree: int = 5) -> PixelCurve:
    fitted = fit_log_time_polynomial(moving_average(curve.values, window), degree)
    return replace(curve, values=np.clip(fitted, 0.0, 255.0))


def curve_to_stripe(curve: PixelCurve) -> StripeImage:
    v = np.asarray(curve.values, dtype=float)
    if v.size < 1:
        raise ValueError("empty curve")
    return StripeImage(np.repeat(v[:, None], v.size, axis=1), curve.label_depth)


def log_enhance(img: StripeImage) -> StripeImage:
    """``s = 255 (q - min q) / (max q - min q)`` with ``q = ln(1 + v)``.

    A flat image (``max q == min q``) maps to all zeros.
    """
    q = np.log1p(np.asarray(img.pixels, dtype=float))
    lo, hi = q.min(), q.max()
    if hi == lo:
        return replace(img, pixels=np.zeros_like(q))
    s = 255.0 * ((q - lo) / (hi - lo))  # x/x is exactly 1, so the top maps to 255
    return replace(img, pixels=np.clip(s, 0.0, 255.0))


def resize(img, size: int) -> np.ndarray:
    """Block-mean pooling of an ``N x N`` image down to ``size x size``."""
    px = img.pixels if isinstance(img, StripeImage) else np.asarray(img, dtype=float)
    n = px.shape[0]
    if px.shape != (n, n):
        raise ValueError(f"expected a square image, got shape {px.shape}")
    if size < 1 or n % size:
        raise NotDivisible(f"image side {n} is not divisible by {size}")
    f = n // size
    return px.reshape(size, f, size, f).mean(axis=(1, 3))


def normalize(grid) -> np.ndarray:
    """[0, 255] -> [-1, 1] (mean 0.5, std 0.5 after scaling to [0, 1])."""
    return (np.asarray(grid, dtype=float) / 255.0 - 0.5) / 0.5


def denormalize(x) -> np.ndarray:
    return (np.asarray(x, dtype=float) * 0.5 + 0.5) * 255.0


def to_uint8(grid) -> np.ndarray:
    return np.clip(round_half_away(grid), 0, 255).astype(np.uint8)


def prepare_image(raw: PixelCurve, opts: PipelineOptions = PipelineOptions()) -> np.ndarray:
    """Full pipeline up to the 8-bit ``S x S`` image that gets written as PGM."""
    curve = subsample(raw, opts.stride, opts.target_len)
    curve = smooth(curve, opts.smooth_window, opts.poly_degree)
    img = curve_to_stripe(curve)
    if opts.enhance:
        img = log_enhance(img)
    return to_uint8(resize(img, opts.input_size))


def model_input(raw: PixelCurve, opts: PipelineOptions = PipelineOptions()) -> np.ndarray:
    return normalize(prepare_image(raw, opts))
