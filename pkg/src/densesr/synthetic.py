"""Procedural grayscale corpus: bright-rimmed cells over a smooth, mottled background.

Stands in for a real microscopy corpus in tests and demos. Output is
quantised to 8 bits so it round-trips through PGM exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imgproc import GrayImage, quantize, write_pgm


def _smooth_noise(rng: np.random.Generator, size: int, cutoff: float) -> np.ndarray:
    noise = rng.normal(size=(size, size))
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    out = np.real(np.fft.ifft2(np.fft.fft2(noise) * np.exp(-((radius / cutoff) ** 2))))
    return (out - out.mean()) / (out.std() + 1e-12)


def cell_image(size: int = 256, seed: int = 0, cells: int | None = None, noise: float = 0.01) -> np.ndarray:
    """One ``[size,size]`` image in [0,1]; ``noise`` is the std of added per-pixel Gaussian noise."""
    rng = np.random.default_rng(seed)
    img = 0.35 + 0.08 * _smooth_noise(rng, size, 0.02) + 0.03 * _smooth_noise(rng, size, 0.15)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lo = max(1, size * size // 2500)
    n = cells if cells is not None else int(rng.integers(lo, max(lo + 1, size * size // 1200)))
    for _ in range(n):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(3.0, 11.0, 2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / rx
        v = (-(xx - cx) * s + (yy - cy) * c) / ry
        d = np.sqrt(u * u + v * v)
        edge = 0.5 * (1.0 - np.tanh(0.5 * (d - 1.0) * rng.uniform(8.0, 20.0)))
        rim = np.exp(-(((d - 1.0) / 0.18) ** 2))
        interior = rng.uniform(-0.25, 0.15)
        img += interior * edge + rng.uniform(0.15, 0.4) * rim
    img += noise * rng.normal(size=img.shape)
    return quantize(np.clip(img, 0.0, 1.0), 8).astype(np.float64) / 255.0


def write_corpus(out_dir, count: int, size: int = 256, seed: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = out / f"cells_{seed}_{i:03d}.pgm"
        write_pgm(GrayImage(cell_image(size, seed * 100003 + i)), path)
        paths.append(path)
    return paths
