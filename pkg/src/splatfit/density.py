"""Adaptive density control: view statistics, clone/split decisions,
pruning and opacity reset.

Two densification criteria share one accumulator:

* ``baseline``: mean NDC-gradient norm over the views that saw the Gaussian.
* ``opacity_weighted``: the same mean weighted by a per-view contribution
  ``t`` (by default the Gaussian's summed blend weight in that view).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from splatfit.scene import GaussianCloud, logit, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

KEEP, CLONE, SPLIT = 0, 1, 2
SPLIT_SCALE_DIVISOR = 1.6
RESET_OPACITY = 0.01


class DensityError(RuntimeError):
    pass


@dataclass
class DensifyConfig:
    tau_pos: float = 0.0002
    scale_split_fraction: float = 0.01
    interval: int = 100
    start_iter: int = 500
    stop_iter: int = 15000
    opacity_reset_interval: int = 3000
    prune_opacity_threshold: float = 0.005
    prune_scale_fraction: float = 0.1
    mode: Literal["baseline", "opacity_weighted"] = "baseline"
    # "blend_weight": t = sum_p alpha*T; "pixel_transmittance": t = sum_p T
    t_reading: Literal["blend_weight", "pixel_transmittance"] = "blend_weight"

    def __post_init__(self):
        if not self.tau_pos > 0:
            raise ValueError("tau_pos must be > 0")
        if not self.start_iter < self.stop_iter:
            raise ValueError("start_iter must be < stop_iter")
        if self.mode not in ("baseline", "opacity_weighted"):
            raise ValueError(f"unknown densify mode {self.mode!r}")
        if self.t_reading not in ("blend_weight", "pixel_transmittance"):
            raise ValueError(f"unknown t_reading {self.t_reading!r}")


@dataclass
class DensifyStats:
    grad_norm_sum: np.ndarray
    weighted_grad_sum: np.ndarray
    transmittance_sum: np.ndarray
    view_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return self.view_count.shape[0]

    def reset(self) -> None:
        for arr in (self.grad_norm_sum, self.weighted_grad_sum, self.transmittance_sum, self.view_count):
            arr[:] = 0

    def select(self, index) -> "DensifyStats":
        return DensifyStats(
            self.grad_norm_sum[index].copy(),
            self.weighted_grad_sum[index].copy(),
            self.transmittance_sum[index].copy(),
            self.view_count[index].copy(),
        )


def record_view(stats: DensifyStats, index: int, ndc_grad, t_view: float, visible: bool = True) -> None:
    """Accumulate one view of Gaussian ``index``."""
    if t_view < 0:
        raise DensityError(f"negative transmittance weight {t_view} for Gaussian {index}")
    if not visible:
        return
    g = float(np.hypot(*np.asarray(ndc_grad, dtype=np.float64)))
    stats.grad_norm_sum[index] += g
    stats.weighted_grad_sum[index] += t_view * g
    stats.transmittance_sum[index] += t_view
    stats.view_count[index] += 1


def record_views(stats: DensifyStats, ndc_grad: np.ndarray, t_view: np.ndarray, visible: np.ndarray) -> None:
    """Vectorized ``record_view`` over all Gaussians of one render."""
    t_view = np.asarray(t_view, dtype=np.float64)
    if (t_view < 0).any():
        raise DensityError(f"negative transmittance weight for Gaussian(s) {np.flatnonzero(t_view < 0)[:10].tolist()}")
    vis = np.asarray(visible, dtype=bool)
    g = np.hypot(ndc_grad[:, 0], ndc_grad[:, 1])
    stats.grad_norm_sum[vis] += g[vis]
    stats.weighted_grad_sum[vis] += t_view[vis] * g[vis]
    stats.transmittance_sum[vis] += t_view[vis]
    stats.view_count[vis] += 1


def criterion_values(stats: DensifyStats, mode: str) -> np.ndarray:
    """Per-Gaussian criterion; NaN where the Gaussian cannot be evaluated."""
    if mode == "baseline":
        num, den = stats.grad_norm_sum, stats.view_count.astype(np.float64)
    elif mode == "opacity_weighted":
        num, den = stats.weighted_grad_sum, stats.transmittance_sum
    else:
        raise ValueError(f"unknown densify mode {mode!r}")
    out = np.full(len(stats), np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def densify_decision(stats: DensifyStats, max_scales: np.ndarray, config: DensifyConfig, scene_extent: float) -> np.ndarray:
    """KEEP / CLONE / SPLIT per Gaussian.

    ``max_scales`` are the largest activated axis scales; Gaussians over
    ``scale_split_fraction * scene_extent`` are split, smaller ones cloned.
    """
    value = criterion_values(stats, config.mode)
    hot = np.nan_to_num(value, nan=-np.inf) > config.tau_pos
    big = np.asarray(max_scales) > config.scale_split_fraction * scene_extent
    decisions = np.full(len(stats), KEEP, dtype=np.int64)
    decisions[hot & big] = SPLIT
    decisions[hot & ~big] = CLONE
    return decisions


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    # source index per output Gaussian for carried-over ones, -1 for new ones
    origin: np.ndarray
    n_clone: int
    n_split: int


def apply_densify(
    cloud: GaussianCloud,
    decisions: np.ndarray,
    rng: np.random.Generator,
    clone_offset: np.ndarray | None = None,
) -> DensifyResult:
    """Clone and split according to ``decisions``.

    Output order: surviving originals (KEEP and CLONE) in their original
    order, then clones, then split children in pairs. Clones are shifted by
    ``clone_offset`` (e.g. one optimizer step of the position).
    """
    decisions = np.asarray(decisions)
    if decisions.shape != (len(cloud),):
        raise DensityError("decisions are not aligned with the cloud")
    if (decisions == KEEP).all():
        return DensifyResult(cloud, np.arange(len(cloud)), 0, 0)

    survivors = np.flatnonzero(decisions != SPLIT)
    clone_idx = np.flatnonzero(decisions == CLONE)
    split_idx = np.flatnonzero(decisions == SPLIT)

    clones = cloud.select(clone_idx)
    if clone_offset is not None:
        clones.means += clone_offset[clone_idx]

    parents = cloud.select(np.repeat(split_idx, 2))
    scales = np.exp(parents.log_scales)
    samples = rng.standard_normal(scales.shape) * scales
    rot = quat_to_rotmat(parents.quats)
    parents.means += np.einsum("nij,nj->ni", rot, samples)
    parents.log_scales -= np.log(SPLIT_SCALE_DIVISOR)

    out = cloud.select(survivors).extend(clones).extend(parents)
    origin = np.concatenate([survivors, np.full(len(clone_idx) + 2 * len(split_idx), -1)])
    return DensifyResult(out, origin, len(clone_idx), len(split_idx))


def prune_mask(cloud: GaussianCloud, config: DensifyConfig, scene_extent: float, check_size: bool) -> np.ndarray:
    """True for Gaussians to remove."""
    low_opacity = sigmoid(cloud.opacity_logits) < config.prune_opacity_threshold
    if not check_size:
        return low_opacity
    too_big = np.exp(cloud.log_scales).max(axis=1) > config.prune_scale_fraction * scene_extent
    return low_opacity | too_big


def prune(cloud: GaussianCloud, mask: np.ndarray) -> GaussianCloud:
    if mask.all():
        raise DensityError("pruning would remove every Gaussian")
    return cloud.select(~mask)


def reset_opacity(cloud: GaussianCloud) -> None:
    """Clamp activated opacities to at most RESET_OPACITY, in place."""
    cloud.opacity_logits = np.minimum(cloud.opacity_logits, float(logit(RESET_OPACITY)))


def prune_and_reset(
    cloud: GaussianCloud, iteration: int, config: DensifyConfig, scene_extent: float
) -> tuple[GaussianCloud, np.ndarray, bool]:
    """Prune, then reset opacities if ``iteration`` is on the reset cadence.

    World-size pruning only starts once the first opacity reset has
    happened, so large early Gaussians (e.g. from sparse initializations)
    survive the first densification rounds. Returns (cloud, kept-index
    array, whether a reset happened).
    """
    mask = prune_mask(cloud, config, scene_extent, check_size=iteration > config.opacity_reset_interval)
    kept = np.flatnonzero(~mask)
    out = prune(cloud, mask) if mask.any() else cloud
    did_reset = iteration > 0 and iteration % config.opacity_reset_interval == 0
    if did_reset:
        reset_opacity(out)
    return out, kept, did_reset
