"""PSNR and SSIM for images in [0, 1]."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two leading axes."""
    n = k.size
    h, w = img.shape[:2]
    tmp = sum(k[i] * img[i : h - n + 1 + i] for i in range(n))
    return sum(k[i] * tmp[:, i : w - n + 1 + i] for i in range(n))


def _filter_valid_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.size
    pad = [(n - 1, n - 1), (n - 1, n - 1)] + [(0, 0)] * (g.ndim - 2)
    return _filter_valid(np.pad(g, pad), k[::-1])


def ssim_map_terms(a, b):
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _window()
    c1, c2 = K1**2, K2**2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    m_aa, m_bb, m_ab = _filter_valid(a * a, k), _filter_valid(b * b, k), _filter_valid(a * b, k)
    num1 = 2 * mu_a * mu_b + c1
    den1 = mu_a**2 + mu_b**2 + c1
    num2 = 2 * (m_ab - mu_a * mu_b) + c2
    den2 = (m_aa - mu_a**2) + (m_bb - mu_b**2) + c2
    smap = num1 * num2 / (den1 * den2)
    return smap, (a, b, k, mu_a, mu_b, num1, den1, num2, den2)


def ssim(a, b) -> float:
    """Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5) over valid
    windows and channels."""
    smap, _ = ssim_map_terms(a, b)
    return float(smap.mean())


def ssim_with_grad(render, target) -> tuple[float, np.ndarray]:
    """SSIM(render, target) and its gradient w.r.t. ``render``."""
    smap, (a, b, k, mu_a, mu_b, num1, den1, num2, den2) = ssim_map_terms(render, target)
    g = np.full(smap.shape, 1.0 / smap.size)
    d_mu_a = g * smap * (2 * mu_b / num1 - 2 * mu_a / den1 - 2 * mu_b / num2 + 2 * mu_a / den2)
    d_m_aa = g * (-smap / den2)
    d_m_ab = g * (2 * smap / num2)
    grad = (
        _filter_valid_adjoint(d_mu_a, k)
        + 2 * a * _filter_valid_adjoint(d_m_aa, k)
        + b * _filter_valid_adjoint(d_m_ab, k)
    )
    return float(smap.mean()), grad


@dataclass
class MetricReport:
    """Per-view PSNR/SSIM plus their means."""

    views: list[str]
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["view", "psnr", "ssim"])
        for v, p, s in zip(self.views, self.psnr, self.ssim):
            writer.writerow([v, repr(p), repr(s)])
        writer.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([4] + [len(v) for v in self.views])
        lines = [f"{'view':<{width}}  {'PSNR':>8}  {'SSIM':>6}"]
        for v, p, s in zip(self.views, self.psnr, self.ssim):
            lines.append(f"{v:<{width}}  {p:8.3f}  {s:6.4f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:8.3f}  {self.mean_ssim:6.4f}")
        return "\n".join(lines)


def evaluate(pairs) -> MetricReport:
    """``pairs``: iterable of (name, render, ground_truth)."""
    report = MetricReport([], [], [])
    for name, render, gt in pairs:
        render = np.clip(render, 0.0, 1.0)
        report.views.append(name)
        report.psnr.append(psnr(render, gt))
        report.ssim.append(ssim(render, gt))
    return report
