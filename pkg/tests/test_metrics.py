import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densesr.errors import ConfigError, ShapeError
from densesr.metrics import (
    MetricRow,
    aggregate,
    format_psnr,
    format_ssim,
    gaussian_window,
    psnr,
    read_metric_csv,
    ssim,
    write_aggregate_csv,
    write_delta_csv,
    write_rows_csv,
)

PUBLISHED = Path(__file__).parent / "data" / "published_aggregate.csv"


def psnr_reference(x, y):
    total = 0.0
    for a, b in zip(x.ravel().tolist(), y.ravel().tolist()):
        total += (a - b) ** 2
    return 10 * math.log10(1.0 / (total / x.size))


def ssim_reference(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-window SSIM with explicit loops over every valid window position."""
    half = (size - 1) / 2
    w = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    w /= w.sum()
    c1, c2 = k1**2, k2**2
    h, wd = x.shape
    scores = []
    for r in range(h - size + 1):
        for c in range(wd - size + 1):
            px = x[r : r + size, c : c + size]
            py = y[r : r + size, c : c + size]
            mx = (w * px).sum()
            my = (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cov = (w * (px - mx) * (py - my)).sum()
            scores.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(scores))


class TestPSNR:
    def test_uniform_error_is_20db(self):
        x = np.full((8, 8), 0.5)
        assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_identical_is_infinite(self):
        x = np.zeros((4, 4))
        assert psnr(x, x) == math.inf
        assert format_psnr(psnr(x, x)) == "inf"

    def test_matches_reference(self, rng):
        x, y = rng.random((32, 32)), rng.random((32, 32))
        assert psnr(x, y) == pytest.approx(psnr_reference(x, y), abs=1e-7)

    def test_symmetric(self, rng):
        x, y = rng.random((16, 16)), rng.random((16, 16))
        assert psnr(x, y) == psnr(y, x)

    def test_decreases_with_noise(self, rng):
        x = rng.random((16, 16)) * 0.5 + 0.25
        noise = rng.uniform(-1, 1, size=x.shape)
        values = [psnr(x, x + a * noise) for a in (0.01, 0.05, 0.1, 0.2)]
        assert values == sorted(values, reverse=True)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_window(self):
        g = gaussian_window()
        assert len(g) == 11 and g.sum() == pytest.approx(1.0)
        assert g[5] == g.max() and g[0] == g[10]

    def test_self_similarity(self, rng):
        x = rng.random((20, 24))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_matches_reference(self, rng):
        x = rng.random((16, 18))
        y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(ssim_reference(x, y), abs=1e-7)

    def test_constant_images_closed_form(self):
        x, y = np.full((12, 12), 0.2), np.full((12, 12), 0.7)
        c1 = 0.01**2
        expected = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1)
        assert ssim(x, y) == pytest.approx(expected, abs=1e-12)

    def test_symmetric_and_bounded(self, rng):
        x, y = rng.random((14, 14)), rng.random((14, 14))
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)
        assert ssim(x, y) <= 1

    def test_too_small(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros((10, 30)), np.zeros((10, 30)))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31))
    def test_never_exceeds_one(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.random((12, 12)), r.random((12, 12))
        assert ssim(x, y) <= 1 + 1e-12


def rows_for(method, scale, values):
    return [MetricRow(f"img{i}", method, scale, p, s) for i, (p, s) in enumerate(values)]


class TestAggregate:
    def test_means_and_deltas(self):
        rows = rows_for("A", 2, [(30, 0.8), (32, 0.9)]) + rows_for("B", 2, [(29, 0.7), (29, 0.7)])
        report = aggregate(rows)
        assert report.means[("A", 2)] == (31, pytest.approx(0.85))
        d = report.delta("A", "B")
        assert d.psnr_delta == 2 and d.ssim_delta == pytest.approx(0.15)
        assert report.delta("B", "A").psnr_delta == -2

    def test_single_method_has_no_deltas(self):
        assert aggregate(rows_for("A", 2, [(30, 0.8)])).deltas == []

    def test_mismatched_scales(self):
        rows = rows_for("A", 2, [(30, 0.8)]) + rows_for("B", 4, [(30, 0.8)])
        assert aggregate(rows).deltas == []
        with pytest.raises(ConfigError):
            aggregate(rows, strict=True)

    def test_empty(self):
        with pytest.raises(ConfigError):
            aggregate([])

    def test_published_table_deltas(self):
        report = aggregate(read_metric_csv(PUBLISHED), strict=True)
        shown = {(d.method_a, d.method_b): (format_psnr(d.psnr_delta), format_ssim(d.ssim_delta)) for d in report.deltas}
        assert shown[("DenseNet", "Nearest")][0] == "2.08"
        assert shown[("DenseNet", "Bilinear")][0] == "1.93"
        assert shown[("DenseNet", "Bicubic")][0] == "1.14"
        assert shown[("DenseNet", "A+")][1] == "0.020"
        assert shown[("DenseNet", "SRCNN")][1] == "0.019"

    def test_csv_round_trip(self, tmp_path, rng):
        rows = rows_for("A", 2, rng.random((3, 2)).tolist()) + [MetricRow("same", "A", 4, math.inf, 1.0)]
        write_rows_csv(rows, tmp_path / "rows.csv")
        assert read_metric_csv(tmp_path / "rows.csv") == rows
        report = aggregate(rows)
        write_aggregate_csv(report, tmp_path / "agg.csv")
        again = aggregate(read_metric_csv(tmp_path / "agg.csv"))
        assert again.means == report.means

    def test_delta_csv_is_display_rounded(self, tmp_path):
        report = aggregate(read_metric_csv(PUBLISHED))
        write_delta_csv(report, tmp_path / "d.csv")
        assert "DenseNet,Nearest,2.08,0.112" in (tmp_path / "d.csv").read_text()

    def test_unrecognised_csv(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            read_metric_csv(tmp_path / "x.csv")
