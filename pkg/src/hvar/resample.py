"""Image container, resampling, and the simplified LR degradation pipeline.

Sampling convention (used by every resize in the package): pixel ``i`` of an
axis of length ``n`` covers the interval ``[i, i + 1)`` and has its center at
``i + 0.5``.  Resizing an axis from ``n_in`` to ``n_out`` maps output center
``(j + 0.5)`` to input coordinate ``(j + 0.5) * n_in / n_out``.

* ``bilinear``: linear interpolation between the two nearest input centers;
  coordinates beyond the first/last center are clamped (no extrapolation).
* ``area``: exact box filter, each output pixel is the length-weighted mean of
  the input pixels its interval overlaps.  Fractional overlaps are allowed.
* ``nearest``: the input pixel containing the mapped output center.

Each axis is resized by a constant matrix, so a resize is ``R @ x @ C.T`` over
the last two axes and is differentiable through :func:`hvar.tensor.apply_spatial`.
When ``mode`` is omitted, an axis that shrinks uses ``area`` and an axis that
grows uses ``bilinear``; an axis of unchanged length is copied exactly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import tensor as T
from .tensor import Tensor

MODES = ("bilinear", "area", "nearest")


@dataclass
class Image:
    """RGB image, ``pixels`` of shape (3, H, W) with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[0] != 3 or px.shape[1] < 1 or px.shape[2] < 1:
            raise ValueError(f"Image expects shape (3, H, W) with H, W >= 1, got {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """(n_out, n_in) matrix resizing one axis under the package convention."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize sizes must be >= 1, got {n_in} -> {n_out}")
    if mode not in MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
    elif mode == "bilinear":
        scale = n_in / n_out
        for j in range(n_out):
            src = (j + 0.5) * scale - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            lo = int(np.floor(src))
            hi = min(lo + 1, n_in - 1)
            t = src - lo
            m[j, lo] += 1.0 - t
            m[j, hi] += t
    elif mode == "area":
        scale = n_in / n_out
        for j in range(n_out):
            a, b = j * scale, (j + 1) * scale
            for i in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
                overlap = min(b, i + 1) - max(a, i)
                if overlap > 0:
                    m[j, i] = overlap / scale
    else:
        scale = n_in / n_out
        for j in range(n_out):
            m[j, min(int(np.floor((j + 0.5) * scale)), n_in - 1)] = 1.0
    m.setflags(write=False)
    return m


def _axis_mode(n_in: int, n_out: int, mode: str | None) -> str:
    if mode is not None:
        return mode
    return "area" if n_out < n_in else "bilinear"


def interpolate(src, target_h: int, target_w: int, mode: str | None = None):
    """Resize the last two axes of ``src`` (Image, Tensor, or ndarray).

    Returns the same kind as the input.  Tensors stay on the gradient tape.
    """
    target_h, target_w = int(target_h), int(target_w)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"interpolate targets must be >= 1, got {(target_h, target_w)}")
    if isinstance(src, Image):
        return Image(interpolate(src.pixels, target_h, target_w, mode))
    data = src.data if isinstance(src, Tensor) else np.asarray(src, dtype=np.float64)
    h, w = data.shape[-2:]
    if (h, w) == (target_h, target_w):
        return src if isinstance(src, Tensor) else data.copy()
    rows = resize_matrix(h, target_h, _axis_mode(h, target_h, mode))
    cols = resize_matrix(w, target_w, _axis_mode(w, target_w, mode))
    if isinstance(src, Tensor):
        return T.apply_spatial(src, rows, cols)
    return np.matmul(np.matmul(rows, data), cols.T)


# degradation -----------------------------------------------------------------
class DegradationClass(enum.IntEnum):
    DEGRADED = 0
    NON_DEGRADED = 1
    CLASS_FREE = 2


@dataclass(frozen=True)
class DegradationConfig:
    """Blur -> area downsample -> Gaussian noise, or bilinear-only with prob ``p``.

    Sigma ranges are in HR pixels (blur) and unit intensity (noise).
    """

    blur_sigma: tuple[float, float] = (0.2, 2.0)
    factor: int = 4
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    bilinear_only_prob: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("degradation factor must be >= 1")
        if not 0.0 <= self.bilinear_only_prob <= 1.0:
            raise ValueError("bilinear_only_prob must lie in [0, 1]")
        for lo, hi in (self.blur_sigma, self.noise_sigma):
            if lo < 0 or hi < lo:
                raise ValueError("sigma ranges must satisfy 0 <= lo <= hi")


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return pixels.copy()
    out = gaussian_filter1d(pixels, sigma, axis=-1, mode="reflect", truncate=3.0)
    return gaussian_filter1d(out, sigma, axis=-2, mode="reflect", truncate=3.0)


def degrade(hr: Image, cfg: DegradationConfig, seed: int | None = None) -> tuple[Image, DegradationClass]:
    """Produce an LR observation of ``hr``; deterministic in ``(hr, cfg, seed)``.

    ``seed`` defaults to ``cfg.seed``.
    """
    f = cfg.factor
    if hr.height % f or hr.width % f:
        raise ValueError(f"HR size {hr.height}x{hr.width} is not divisible by factor {f}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    h, w = hr.height // f, hr.width // f
    if rng.random() < cfg.bilinear_only_prob:
        return interpolate(hr, h, w, "bilinear"), DegradationClass.NON_DEGRADED
    blur = rng.uniform(*cfg.blur_sigma)
    noise = rng.uniform(*cfg.noise_sigma)
    x = gaussian_blur(hr.pixels, blur)
    x = interpolate(x, h, w, "area")
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return Image(x), DegradationClass.DEGRADED
