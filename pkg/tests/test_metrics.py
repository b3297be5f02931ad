import math

import numpy as np
import pytest

from splatfit.metrics import PSNR_CAP, MetricReport, evaluate, psnr, ssim


def test_psnr_identical_is_cap(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a.copy()) == PSNR_CAP == 100.0


def test_psnr_uniform_offset():
    a = np.full((5, 7, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_two_line_oracle(rng):
    a, b = rng.uniform(size=(2, 16, 12, 3))
    mse = ((a - b) ** 2).sum() / a.size
    assert psnr(a, b) == pytest.approx(-10 * math.log10(mse), rel=1e-12)


def test_psnr_decreases_with_noise(rng):
    base = rng.uniform(0.3, 0.7, (16, 16, 3))
    noise = rng.uniform(-1, 1, base.shape)
    vals = [psnr(base, base + amp * noise) for amp in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_psnr_symmetric(rng):
    a, b = rng.uniform(size=(2, 9, 9, 3))
    assert psnr(a, b) == psnr(b, a)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 15, 3)))


def test_ssim_identical(rng):
    a = rng.uniform(size=(20, 20, 3))
    assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_checkerboard():
    yy, xx = np.mgrid[:24, :24]
    a = (((yy // 2) + (xx // 2)) % 2).astype(float)
    a = np.repeat(a[:, :, None], 3, axis=2)
    assert ssim(a, 1.0 - a) < 0.5


def test_ssim_symmetric_exactly(rng):
    a, b = rng.uniform(size=(2, 17, 19, 3))
    assert ssim(a, b) == ssim(b, a)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_known_value_constant_images():
    # constant images: only the luminance term survives
    a = np.full((11, 11, 1), 0.2)
    b = np.full((11, 11, 1), 0.6)
    c1 = 0.01**2
    want = (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1)
    assert ssim(a, b) == pytest.approx(want, rel=1e-12)


def test_report(rng):
    gt = rng.uniform(size=(2, 16, 16, 3))
    rep = evaluate([("a", gt[0], gt[0]), ("b", gt[1] + 0.1, gt[1])])
    assert rep.views == ["a", "b"]
    assert rep.psnr[0] == 100.0
    assert rep.mean_psnr == pytest.approx((rep.psnr[0] + rep.psnr[1]) / 2)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "view,psnr,ssim" and lines[-1].startswith("mean,")
    assert len(lines) == 4
    assert "mean" in rep.to_table()
    assert math.isnan(MetricReport([], [], []).mean_psnr)
