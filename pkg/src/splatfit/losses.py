"""Attention-weighted photometric losses and their schedule.

Weight maps are computed from the current render and treated as constants:
no gradient flows through the edge pipeline or the max normalization. All
losses are means over the H*W*3 image elements.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from splatfit.edges import enhanced_edges
from splatfit.metrics import ssim_with_grad


@dataclass(frozen=True)
class ScheduleParams:
    steepness: float = 10.0
    total_iters: int = 7000
    decay_node: float = 0.25

    def __post_init__(self):
        if not self.steepness > 0:
            raise ValueError("steepness must be > 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not 0 < self.decay_node < 1:
            raise ValueError("decay_node must lie in (0, 1)")


def schedule(i: float, params: ScheduleParams) -> float:
    """Geometric-attention share at iteration ``i``: 1 / (1 + exp(2 s (i/N - m)))."""
    return float(expit(-2.0 * params.steepness * (i / params.total_iters - params.decay_node)))


def _normalized(diff: np.ndarray) -> np.ndarray:
    peak = diff.max()
    if peak <= 0.0:
        return np.zeros_like(diff)
    return diff / peak


def geometric_weights(gt, render, radius: int = 2, gt_edges: np.ndarray | None = None) -> np.ndarray:
    """(H, W) weights from the normalized difference of spread edge maps.

    ``gt_edges`` may carry a cached ``enhanced_edges(gt, radius)``.
    """
    gt = np.asarray(gt, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    if gt.shape != render.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {render.shape}")
    e_gt = enhanced_edges(gt, radius) if gt_edges is None else gt_edges
    e_render = enhanced_edges(render, radius)
    return _normalized(np.abs(e_gt - e_render))


def appearance_weights(gt, render) -> np.ndarray:
    """(H, W, 3) per-channel weights |gt - render| / global max."""
    gt = np.asarray(gt, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    if gt.shape != render.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {render.shape}")
    return _normalized(np.abs(gt - render))


def weighted_l1(gt, render, weights) -> tuple[float, np.ndarray]:
    """Mean of ``weights * |gt - render|`` and its gradient w.r.t. render.

    A 2D weight map is broadcast over channels.
    """
    gt = np.asarray(gt, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[:, :, None]
    diff = render - gt
    count = diff.size
    loss = float(np.sum(w * np.abs(diff)) / count)
    grad = np.broadcast_to(w, diff.shape) * np.sign(diff) / count
    return loss, grad


def l1_loss(gt, render) -> tuple[float, np.ndarray]:
    return weighted_l1(gt, render, 1.0)


def geometric_loss(gt, render, weights) -> tuple[float, np.ndarray]:
    return weighted_l1(gt, render, weights)


def appearance_loss(gt, render, weights) -> tuple[float, np.ndarray]:
    return weighted_l1(gt, render, weights)


@dataclass(frozen=True)
class LossConfig:
    """Which terms enter the objective.

    ``use_geometric`` / ``use_appearance`` select the attention terms;
    ``dssim_weight`` > 0 adds ``dssim_weight * (1 - SSIM)``.
    """

    use_geometric: bool = True
    use_appearance: bool = True
    edge_radius: int = 2
    dssim_weight: float = 0.0
    schedule: ScheduleParams = field(default_factory=ScheduleParams)


@dataclass
class LossComponents:
    total: float
    l1: float
    geo: float
    app: float
    f: float
    dssim: float = 0.0


def total_loss(
    gt, render, i: int, config: LossConfig, gt_edges: np.ndarray | None = None
) -> tuple[float, np.ndarray, LossComponents]:
    """L = L1 + f(i) L_geo + (1 - f(i)) L_app [+ lambda (1 - SSIM)].

    Disabled terms report 0; a run without the geometric term reports f = 0.
    Returns (L, dL/drender, components).
    """
    gt = np.asarray(gt, dtype=np.float64)
    render = np.asarray(render, dtype=np.float64)
    l1, grad = l1_loss(gt, render)
    grad = grad.copy()
    f = schedule(i, config.schedule) if config.use_geometric else 0.0
    geo = app = dssim = 0.0
    if config.use_geometric:
        w = geometric_weights(gt, render, config.edge_radius, gt_edges)
        geo, g_geo = geometric_loss(gt, render, w)
        grad += f * g_geo
    if config.use_appearance:
        w_app = appearance_weights(gt, render)
        app, g_app = appearance_loss(gt, render, w_app)
        grad += (1.0 - f) * g_app
    if config.dssim_weight > 0.0:
        s, g_s = ssim_with_grad(render, gt)
        dssim = config.dssim_weight * (1.0 - s)
        grad -= config.dssim_weight * g_s
    total = l1 + f * geo + (1.0 - f) * app + dssim
    return total, grad, LossComponents(total, l1, geo, app, f, dssim)
