"""PSNR, SSIM and Table-style aggregation of per-image scores."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .imgproc import GrayImage


@dataclass(frozen=True)
class MetricConfig:
    data_range: float = 1.0
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


DEFAULT_METRICS = MetricConfig()


def _pixels(img) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, y, cfg: MetricConfig = DEFAULT_METRICS) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(cfg.data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1-D normalised Gaussian taps; the 2-D window is their outer product."""
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[:, i : w - n + 1 + i] for i in range(n))
    return sum(g[i] * rows[i : h - n + 1 + i, :] for i in range(n))


def ssim_map(x, y, cfg: MetricConfig = DEFAULT_METRICS) -> np.ndarray:
    a, b = _pair(x, y)
    if a.ndim != 2 or min(a.shape) < cfg.window:
        raise ConfigError(f"SSIM needs images of at least {cfg.window}x{cfg.window}, got {a.shape}")
    g = gaussian_window(cfg.window, cfg.sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(x, y, cfg: MetricConfig = DEFAULT_METRICS) -> float:
    """Mean SSIM over fully interior Gaussian windows (no padding)."""
    return float(ssim_map(x, y, cfg).mean())


# -- aggregation -------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    image_id: str
    method: str
    scale: int
    psnr: float
    ssim: float


@dataclass(frozen=True)
class MethodDelta:
    method_a: str
    method_b: str
    psnr_delta: float
    ssim_delta: float


@dataclass
class EvalReport:
    rows: list[MetricRow]
    means: dict[tuple[str, int], tuple[float, float]] = field(default_factory=dict)
    deltas: list[MethodDelta] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return sorted({m for m, _ in self.means})

    def scales(self, method: str) -> list[int]:
        return sorted(s for m, s in self.means if m == method)

    def delta(self, method_a: str, method_b: str) -> MethodDelta:
        for d in self.deltas:
            if d.method_a == method_a and d.method_b == method_b:
                return d
        raise KeyError((method_a, method_b))

    def cross_scale_mean(self, method: str) -> tuple[float, float]:
        scales = self.scales(method)
        p = sum(self.means[(method, s)][0] for s in scales) / len(scales)
        q = sum(self.means[(method, s)][1] for s in scales) / len(scales)
        return p, q


def aggregate(rows: Iterable[MetricRow], strict: bool = False) -> EvalReport:
    """Per-(method, scale) means and cross-scale mean differences between methods.

    Each delta is ``method_a - method_b`` of the per-scale means averaged over
    scales. Method pairs scored on different scale sets get no delta, or raise
    :class:`ConfigError` when ``strict``.
    """
    rows = list(rows)
    if not rows:
        raise ConfigError("no metric rows to aggregate")
    groups: dict[tuple[str, int], list[MetricRow]] = defaultdict(list)
    for r in rows:
        groups[(r.method, r.scale)].append(r)
    report = EvalReport(rows)
    for key, members in sorted(groups.items()):
        report.means[key] = (
            sum(m.psnr for m in members) / len(members),
            sum(m.ssim for m in members) / len(members),
        )
    for a, b in permutations(report.methods, 2):
        if report.scales(a) != report.scales(b):
            if strict:
                raise ConfigError(f"{a} covers scales {report.scales(a)} but {b} covers {report.scales(b)}")
            continue
        pa, sa = report.cross_scale_mean(a)
        pb, sb = report.cross_scale_mean(b)
        report.deltas.append(MethodDelta(a, b, pa - pb, sa - sb))
    return report


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) and value > 0 else f"{value:.2f}"


def format_ssim(value: float) -> str:
    return f"{value:.3f}"


def _num(value: float) -> str:
    return "inf" if math.isinf(value) and value > 0 else repr(float(value))


def write_rows_csv(rows: Sequence[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "method", "scale", "psnr_db", "ssim"])
        for r in rows:
            w.writerow([r.image_id, r.method, r.scale, _num(r.psnr), _num(r.ssim)])


def write_aggregate_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scale", "mean_psnr", "mean_ssim"])
        for (method, scale), (p, s) in sorted(report.means.items()):
            w.writerow([method, scale, _num(p), _num(s)])


def write_delta_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method_a", "method_b", "mean_psnr_delta", "mean_ssim_delta"])
        for d in report.deltas:
            w.writerow([d.method_a, d.method_b, format_psnr(d.psnr_delta), format_ssim(d.ssim_delta)])


def read_metric_csv(path) -> list[MetricRow]:
    """Read either a per-image report CSV or an aggregate CSV as metric rows.

    Aggregate lines become one pseudo-row per (method, scale), which leaves
    their means unchanged under :func:`aggregate`.
    """
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        fields = set(reader.fieldnames or ())
        rows = []
        if {"image_id", "method", "scale", "psnr_db", "ssim"} <= fields:
            for rec in reader:
                rows.append(MetricRow(rec["image_id"], rec["method"], int(rec["scale"]), float(rec["psnr_db"]), float(rec["ssim"])))
        elif {"method", "scale", "mean_psnr", "mean_ssim"} <= fields:
            for rec in reader:
                rows.append(MetricRow("mean", rec["method"], int(rec["scale"]), float(rec["mean_psnr"]), float(rec["mean_ssim"])))
        else:
            raise ConfigError(f"{path}: unrecognised metric CSV columns {sorted(fields)}")
    return rows
