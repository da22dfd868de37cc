"""PSNR and SSIM on RGB images in [0, 1].

Both metrics use all three channels (no luma conversion).  Perceptual (LPIPS)
and distribution (FID) metrics are not computed; reports mark them unavailable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .resample import Image

UNAVAILABLE = "unavailable"


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``; identical inputs give ``inf``."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    k = len(g)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(win, k, axis=-2) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window, averaged over channels.

    Windows are placed only where they fit entirely ('valid'); images smaller
    than the window use the largest odd window that fits.
    """
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    size = min(window, a.shape[-1], a.shape[-2])
    if size % 2 == 0:
        size -= 1
    g = gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    name: str
    psnr: float
    ssim: float
    per_scale: dict[int, tuple[float, float]] = field(default_factory=dict)

    def to_line(self) -> str:
        parts = [f"image={self.name}", f"psnr={self.psnr:.6f}", f"ssim={self.ssim:.6f}"]
        for n, (p, s) in sorted(self.per_scale.items()):
            parts += [f"psnr_s{n}={p:.6f}", f"ssim_s{n}={s:.6f}"]
        parts += [f"lpips={UNAVAILABLE}", f"fid={UNAVAILABLE}", "color=rgb"]
        return " ".join(parts)


def evaluate(pred, ref, name: str = "") -> MetricReport:
    return MetricReport(name, psnr(pred, ref), ssim(pred, ref))


def write_report(path: str, reports: list[MetricReport]) -> None:
    """One ``key=value`` record per line, followed by a ``summary`` line."""
    finite = [r.psnr for r in reports if math.isfinite(r.psnr)]
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_line() + "\n")
        if reports:
            fh.write(f"summary count={len(reports)} "
                     f"mean_psnr={np.mean(finite) if finite else math.inf:.6f} "
                     f"mean_ssim={np.mean([r.ssim for r in reports]):.6f}\n")


def read_report(path: str) -> list[dict[str, str]]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("image="):
                records.append(dict(tok.split("=", 1) for tok in line.split()))
    return records
