import math

import numpy as np
import pytest

from hvar.metrics import evaluate, gaussian_window, psnr, read_report, ssim, write_report
from hvar.resample import Image


def ssim_by_windows(a, b, size=7, sigma=1.5):
    """Direct per-window SSIM, one window position at a time."""
    x = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(a.shape[1] - size + 1):
            for j in range(a.shape[2] - size + 1):
                pa, pb = a[c, i:i + size, j:j + size], b[c, i:i + size, j:j + size]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * pa * pa).sum() - ma ** 2
                vb = (w * pb * pb).sum() - mb ** 2
                cov = (w * pa * pb).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_of_uniform_half_against_black():
    assert psnr(np.full((3, 8, 8), 0.5), np.zeros((3, 8, 8))) == pytest.approx(6.0206, abs=1e-3)


def test_psnr_identical_and_range():
    a = np.random.default_rng(0).random((3, 4, 4))
    assert psnr(a, a) == math.inf
    assert psnr(a * 255, (a + 0.1) * 255, data_range=255) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:, :2])


def test_ssim_of_identical_images_is_one(rng):
    a = rng.random((3, 20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_direct_window_loop(rng):
    a = rng.random((3, 12, 12))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    assert ssim(a, b, window=7) == pytest.approx(ssim_by_windows(a, b), abs=1e-12)
    assert ssim(a, b, window=7) < 1.0


def test_ssim_small_images_shrink_the_window(rng):
    a = rng.random((3, 4, 4))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert len(gaussian_window(3)) == 3


def test_report_round_trip(tmp_path, rng):
    a, b = Image(rng.random((3, 8, 8))), Image(rng.random((3, 8, 8)))
    reports = [evaluate(a, b, "x.png"), evaluate(a, a, "y.png")]
    path = tmp_path / "r.txt"
    write_report(str(path), reports)
    recs = read_report(str(path))
    assert [r["image"] for r in recs] == ["x.png", "y.png"]
    assert float(recs[0]["psnr"]) == pytest.approx(reports[0].psnr, abs=1e-6)
    assert recs[0]["lpips"] == "unavailable"
    assert "summary count=2" in path.read_text()
