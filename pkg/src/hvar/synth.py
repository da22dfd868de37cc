"""Deterministic synthetic image sets (gradients, checkerboards, blobs, band-limited noise)."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .resample import Image, gaussian_blur

PATTERNS = ("gradient", "checkerboard", "blobs", "noise")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    count: int = 256
    resolution: int = 64
    patterns: tuple[str, ...] = PATTERNS
    seed: int = 0
    edge_softness: float = 0.6


def _colors(rng, n):
    return rng.uniform(0.05, 0.95, size=(n, 3))


def _gradient(rng, s, yy, xx):
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) / np.sqrt(0.5) + 0.5
    a, b = _colors(rng, 2)
    return a[:, None, None] * (1 - t) + b[:, None, None] * t


def _checkerboard(rng, s, yy, xx):
    cell = rng.choice([6, 8, 12, 16]) / s
    theta = rng.uniform(-0.5, 0.5)
    u = np.cos(theta) * xx + np.sin(theta) * yy + rng.uniform(0, 1)
    v = -np.sin(theta) * xx + np.cos(theta) * yy + rng.uniform(0, 1)
    mask = (np.floor(u / cell) + np.floor(v / cell)) % 2
    a, b = _colors(rng, 2)
    return np.where(mask[None] > 0, a[:, None, None], b[:, None, None])


def _blobs(rng, s, yy, xx):
    img = np.broadcast_to(_colors(rng, 1)[0][:, None, None], (3, s, s)).copy()
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, size=2)
        sig = rng.uniform(0.05, 0.2)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
        col = _colors(rng, 1)[0]
        img = img * (1 - w[None]) + col[:, None, None] * w[None]
    return img


def _noise(rng, s, yy, xx):
    cutoff = rng.integers(3, 7)
    img = np.zeros((3, s, s))
    for c in range(3):
        spec = np.zeros((s, s), dtype=complex)
        k = np.arange(-cutoff, cutoff + 1)
        coef = rng.normal(size=(len(k), len(k))) + 1j * rng.normal(size=(len(k), len(k)))
        spec[np.ix_(k % s, k % s)] = coef
        field = np.real(np.fft.ifft2(spec))
        field = (field - field.mean()) / (field.std() + 1e-12)
        img[c] = 0.5 + 0.18 * field
    return img


_MAKERS = {"gradient": _gradient, "checkerboard": _checkerboard, "blobs": _blobs, "noise": _noise}


def generate_dataset(spec: SyntheticDatasetSpec) -> np.ndarray:
    """Array of shape (count, 3, resolution, resolution) with values in [0, 1]."""
    unknown = set(spec.patterns) - set(PATTERNS)
    if unknown:
        raise ValueError(f"unknown patterns {sorted(unknown)}")
    s = spec.resolution
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.meshgrid((np.arange(s) + 0.5) / s, (np.arange(s) + 0.5) / s, indexing="ij")
    out = np.empty((spec.count, 3, s, s))
    for i in range(spec.count):
        kind = spec.patterns[i % len(spec.patterns)]
        img = _MAKERS[kind](rng, s, yy, xx)
        if kind != "gradient" and rng.random() < 0.5:
            alpha = rng.uniform(0.2, 0.5)
            img = (1 - alpha) * img + alpha * _gradient(rng, s, yy, xx)
        if spec.edge_softness > 0:
            img = gaussian_blur(img, spec.edge_softness)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def write_dataset(directory: str, spec: SyntheticDatasetSpec) -> list[str]:
    """Write the set as PNG files plus ``dataset.txt``; returns the image paths."""
    from .imageio import write_png

    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, px in enumerate(generate_dataset(spec)):
        path = os.path.join(directory, f"img_{i:05d}.png")
        write_png(path, Image(px))
        paths.append(path)
    with open(os.path.join(directory, "dataset.txt"), "w") as fh:
        fh.write(f"count = {spec.count}\nresolution = {spec.resolution}\n"
                 f"patterns = {','.join(spec.patterns)}\nseed = {spec.seed}\n"
                 f"edge_softness = {spec.edge_softness}\n")
    return paths


def load_directory(directory: str) -> np.ndarray:
    from .imageio import read_png

    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG images in {directory}")
    return np.stack([read_png(os.path.join(directory, n)).pixels for n in names])
