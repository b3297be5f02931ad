"""Tile-based front-to-back splat compositing with an analytic backward pass.

The forward pass bins visible Gaussians into 16x16 pixel tiles, orders each
tile list by camera depth (Gaussian index breaks ties) and composites every
pixel front to back. The backward pass walks the same lists back to front,
recovering transmittance by division. Both kernels run serially in a fixed
tile order, so per-Gaussian accumulators are reduced deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from splatfit.projection import Projected, project, project_backward
from splatfit.scene import Camera, GaussianCloud

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4


class RenderError(ValueError):
    pass


@dataclass
class RenderAux:
    """Per-render byproducts consumed by the backward pass and densification."""

    t_final: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W) int, tile-list cursor one past the last contributor
    blend_weight_sum: np.ndarray  # (N,) sum over pixels of alpha * T
    transmittance_sum: np.ndarray  # (N,) sum over pixels of T in front of the Gaussian
    pixel_hit_count: np.ndarray  # (N,) int
    ndc_grad: np.ndarray  # (N, 2), filled by rasterize_backward
    proj: Projected = field(repr=False)
    tile_offsets: np.ndarray = field(repr=False)
    tile_lists: np.ndarray = field(repr=False)
    background: np.ndarray = field(repr=False)
    packed: np.ndarray = field(repr=False)  # per tile-list entry parameters, see _pack

    @property
    def visible_mask(self) -> np.ndarray:
        return self.pixel_hit_count > 0


@numba.njit(cache=True)
def _bin_tiles(order, mean2d, radius, n_tx, n_ty):
    n = order.shape[0]
    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    counts = np.zeros(n_tx * n_ty, np.int64)
    for j in range(n):
        g = order[j]
        x0[j] = max(0, int(np.floor((mean2d[g, 0] - radius[g, 0]) / TILE)))
        x1[j] = min(n_tx - 1, int(np.floor((mean2d[g, 0] + radius[g, 0]) / TILE)))
        y0[j] = max(0, int(np.floor((mean2d[g, 1] - radius[g, 1]) / TILE)))
        y1[j] = min(n_ty - 1, int(np.floor((mean2d[g, 1] + radius[g, 1]) / TILE)))
        for ty in range(y0[j], y1[j] + 1):
            for tx in range(x0[j], x1[j] + 1):
                counts[ty * n_tx + tx] += 1
    offsets = np.zeros(n_tx * n_ty + 1, np.int64)
    for t in range(n_tx * n_ty):
        offsets[t + 1] = offsets[t] + counts[t]
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], np.int64)
    for j in range(n):
        g = order[j]
        for ty in range(y0[j], y1[j] + 1):
            for tx in range(x0[j], x1[j] + 1):
                t = ty * n_tx + tx
                lists[fill[t]] = g
                fill[t] += 1
    return offsets, lists


@numba.njit(cache=True)
def _entry_box(q, x_lo, x_hi, y_lo, y_hi):
    """Pixels of the tile [x_lo, x_hi) x [y_lo, y_hi) an entry can reach."""
    x0 = max(x_lo, int(np.ceil(q[0] - q[10])))
    x1 = min(x_hi, int(np.floor(q[0] + q[10])) + 1)
    y0 = max(y_lo, int(np.ceil(q[1] - q[11])))
    y1 = min(y_hi, int(np.floor(q[1] + q[11])) + 1)
    return x0, x1, y0, y1


# Both kernels walk each tile list entry by entry and visit only the pixels
# inside that entry's reach box, keeping per-pixel compositing state for the
# tile. Per pixel the entries are still taken in list order, and per
# Gaussian the pixels of a tile are still visited in row-major order, so
# every sum is formed in the same order as a plain per-pixel loop.


@numba.njit(cache=True)
def _forward_kernel(width, height, n_tx, offsets, lists, packed, bg, n_gauss):
    image = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    n_contrib = np.zeros((height, width), np.int64)
    bw_sum = np.zeros(n_gauss)
    t_sum = np.zeros(n_gauss)
    hits = np.zeros(n_gauss, np.int64)
    n_ty = (height + TILE - 1) // TILE
    trans = np.empty((TILE, TILE))
    color = np.empty((TILE, TILE, 3))
    last = np.empty((TILE, TILE), np.int64)
    done = np.empty((TILE, TILE), np.bool_)
    for ty in range(n_ty):
        for tx in range(n_tx):
            t = ty * n_tx + tx
            start, end = offsets[t], offsets[t + 1]
            x_lo, y_lo = tx * TILE, ty * TILE
            x_hi, y_hi = min(x_lo + TILE, width), min(y_lo + TILE, height)
            trans[:, :] = 1.0
            color[:, :, :] = 0.0
            last[:, :] = start
            done[:, :] = False
            n_open = (x_hi - x_lo) * (y_hi - y_lo)
            for j in range(start, end):
                if n_open == 0:
                    break
                q = packed[j]
                g = lists[j]
                x0, x1, y0, y1 = _entry_box(q, x_lo, x_hi, y_lo, y_hi)
                for py in range(y0, y1):
                    ly = py - y_lo
                    for px in range(x0, x1):
                        lx = px - x_lo
                        if done[ly, lx]:
                            continue
                        dx = px - q[0]
                        dy = py - q[1]
                        power = -0.5 * (q[2] * dx * dx + q[4] * dy * dy) - q[3] * dx * dy
                        if power > 0.0 or power < q[9]:
                            continue
                        a = min(ALPHA_MAX, q[5] * np.exp(power))
                        if a < ALPHA_MIN:
                            continue
                        tr = trans[ly, lx]
                        test_t = tr * (1.0 - a)
                        if test_t < T_EPS:
                            done[ly, lx] = True
                            n_open -= 1
                            continue
                        w = a * tr
                        color[ly, lx, 0] += w * q[6]
                        color[ly, lx, 1] += w * q[7]
                        color[ly, lx, 2] += w * q[8]
                        bw_sum[g] += w
                        t_sum[g] += tr
                        hits[g] += 1
                        trans[ly, lx] = test_t
                        last[ly, lx] = j + 1
            for py in range(y_lo, y_hi):
                for px in range(x_lo, x_hi):
                    tr = trans[py - y_lo, px - x_lo]
                    image[py, px, 0] = color[py - y_lo, px - x_lo, 0] + tr * bg[0]
                    image[py, px, 1] = color[py - y_lo, px - x_lo, 1] + tr * bg[1]
                    image[py, px, 2] = color[py - y_lo, px - x_lo, 2] + tr * bg[2]
                    t_final[py, px] = tr
                    n_contrib[py, px] = last[py - y_lo, px - x_lo]
    return image, t_final, n_contrib, bw_sum, t_sum, hits


@numba.njit(cache=True)
def _backward_kernel(width, height, n_tx, offsets, lists, packed, bg, t_final, n_contrib, d_image, n_gauss):
    d_mean2d = np.zeros((n_gauss, 2))
    d_conic = np.zeros((n_gauss, 3))
    d_color = np.zeros((n_gauss, 3))
    d_alpha0 = np.zeros(n_gauss)
    n_ty = (height + TILE - 1) // TILE
    trans = np.empty((TILE, TILE))
    # radiance composited behind the current Gaussian, per channel
    behind = np.empty((TILE, TILE, 3))
    # pixels with a zero loss gradient are skipped outright
    limit = np.empty((TILE, TILE), np.int64)
    for ty in range(n_ty):
        for tx in range(n_tx):
            t = ty * n_tx + tx
            start = offsets[t]
            x_lo, y_lo = tx * TILE, ty * TILE
            x_hi, y_hi = min(x_lo + TILE, width), min(y_lo + TILE, height)
            top = start
            for py in range(y_lo, y_hi):
                for px in range(x_lo, x_hi):
                    ly, lx = py - y_lo, px - x_lo
                    tr = t_final[py, px]
                    trans[ly, lx] = tr
                    behind[ly, lx, 0] = tr * bg[0]
                    behind[ly, lx, 1] = tr * bg[1]
                    behind[ly, lx, 2] = tr * bg[2]
                    if d_image[py, px, 0] == 0.0 and d_image[py, px, 1] == 0.0 and d_image[py, px, 2] == 0.0:
                        limit[ly, lx] = start
                    else:
                        limit[ly, lx] = n_contrib[py, px]
                    top = max(top, limit[ly, lx])
            for j in range(top - 1, start - 1, -1):
                q = packed[j]
                g = lists[j]
                ca = q[2]
                cb = q[3]
                cc = q[4]
                x0, x1, y0, y1 = _entry_box(q, x_lo, x_hi, y_lo, y_hi)
                for py in range(y0, y1):
                    ly = py - y_lo
                    for px in range(x0, x1):
                        lx = px - x_lo
                        if j >= limit[ly, lx]:
                            continue
                        dx = px - q[0]
                        dy = py - q[1]
                        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                        if power > 0.0 or power < q[9]:
                            continue
                        gauss = np.exp(power)
                        raw = q[5] * gauss
                        a = min(ALPHA_MAX, raw)
                        if a < ALPHA_MIN:
                            continue
                        g0 = d_image[py, px, 0]
                        g1 = d_image[py, px, 1]
                        g2 = d_image[py, px, 2]
                        tr = trans[ly, lx] / (1.0 - a)
                        trans[ly, lx] = tr
                        w = a * tr
                        d_color[g, 0] += w * g0
                        d_color[g, 1] += w * g1
                        d_color[g, 2] += w * g2
                        inv = 1.0 / (1.0 - a)
                        s0 = behind[ly, lx, 0]
                        s1 = behind[ly, lx, 1]
                        s2 = behind[ly, lx, 2]
                        d_a = g0 * (q[6] * tr - s0 * inv) + g1 * (q[7] * tr - s1 * inv) + g2 * (q[8] * tr - s2 * inv)
                        behind[ly, lx, 0] = s0 + w * q[6]
                        behind[ly, lx, 1] = s1 + w * q[7]
                        behind[ly, lx, 2] = s2 + w * q[8]
                        if raw > ALPHA_MAX:
                            continue
                        d_alpha0[g] += d_a * gauss
                        d_power = d_a * a
                        d_conic[g, 0] += -0.5 * dx * dx * d_power
                        d_conic[g, 1] += -dx * dy * d_power
                        d_conic[g, 2] += -0.5 * dy * dy * d_power
                        d_mean2d[g, 0] += (ca * dx + cb * dy) * d_power
                        d_mean2d[g, 1] += (cb * dx + cc * dy) * d_power
    return d_mean2d, d_conic, d_color, d_alpha0


def footprint_radius(proj: Projected) -> np.ndarray:
    """Half extents of the pixel box a Gaussian can actually reach.

    The 3-sigma box, shrunk to the ellipse where alpha0 * exp(power) stays
    >= ALPHA_MIN. Outside it every pixel would be skipped anyway, so the
    tighter binning only saves work. A small margin guards the boundary.
    """
    reach2 = 2.0 * np.log(np.maximum(proj.alpha0, ALPHA_MIN) / ALPHA_MIN)
    k = np.minimum(3.0, np.sqrt(reach2) + 1e-6)
    return proj.radius * (k / 3.0)[:, None]


def _pack(proj: Projected, lists: np.ndarray) -> np.ndarray:
    # per tile-list entry: mean x, y, conic a, b, c, alpha0, r, g, b, power
    # cut, reach x, reach y. Below the cut, and outside the reach box (the
    # uncapped alpha >= ALPHA_MIN ellipse), alpha is surely < ALPHA_MIN, so
    # the kernels skip those pixels; the margins leave every pixel near the
    # boundary to the exact test.
    with np.errstate(divide="ignore"):
        cut = np.log(ALPHA_MIN / proj.alpha0) - 1e-9
    reach = np.sqrt(2.0 * np.log(np.maximum(proj.alpha0, ALPHA_MIN) / ALPHA_MIN))
    sd = np.sqrt(np.maximum(np.stack([proj.cov2d[:, 0, 0], proj.cov2d[:, 1, 1]], axis=1), 0.0))
    box = sd * (reach * (1.0 + 1e-6))[:, None] + 1e-6
    cols = np.concatenate([proj.mean2d, proj.conic, proj.alpha0[:, None], proj.color, cut[:, None], box], axis=1)
    return np.ascontiguousarray(cols[lists])


def depth_order(proj: Projected) -> np.ndarray:
    """Visible Gaussian indices sorted by depth, index as tie-break."""
    idx = np.flatnonzero(proj.visible)
    return idx[np.lexsort((idx, proj.depth[idx]))]


def _reachable_order(proj: Projected) -> np.ndarray:
    order = depth_order(proj)
    # below ALPHA_MIN a Gaussian is skipped at every pixel
    return order[proj.alpha0[order] >= ALPHA_MIN]


def rasterize_forward(
    cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0)
) -> tuple[np.ndarray, RenderAux]:
    """Render ``cloud`` from ``camera``.

    Returns the (H, W, 3) image, unclamped, and the ``RenderAux`` needed by
    ``rasterize_backward`` and densification.
    """
    if len(cloud) == 0:
        raise RenderError("cannot render an empty cloud")
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(cloud, camera)
    n_tx = (camera.width + TILE - 1) // TILE
    n_ty = (camera.height + TILE - 1) // TILE
    order = _reachable_order(proj)
    offsets, lists = _bin_tiles(order, proj.mean2d, footprint_radius(proj), n_tx, n_ty)
    packed = _pack(proj, lists)
    image, t_final, n_contrib, bw_sum, t_sum, hits = _forward_kernel(
        camera.width, camera.height, n_tx, offsets, lists, packed, bg, len(cloud)
    )
    aux = RenderAux(
        t_final=t_final,
        n_contrib=n_contrib,
        blend_weight_sum=bw_sum,
        transmittance_sum=t_sum,
        pixel_hit_count=hits,
        ndc_grad=np.zeros((len(cloud), 2)),
        proj=proj,
        tile_offsets=offsets,
        tile_lists=lists,
        background=bg,
        packed=packed,
    )
    return image, aux


def rasterize_backward(
    cloud: GaussianCloud, camera: Camera, aux: RenderAux, d_image: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients of a scalar loss given dL/d(image).

    Also stores the gradient w.r.t. each Gaussian's NDC mean in
    ``aux.ndc_grad``.
    """
    n = len(cloud)
    if aux.blend_weight_sum.shape[0] != n:
        raise RenderError(f"render aux was produced for {aux.blend_weight_sum.shape[0]} Gaussians, cloud has {n}")
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (camera.height, camera.width, 3):
        raise RenderError(f"image gradient shape {d_image.shape} does not match camera")
    proj = aux.proj
    n_tx = (camera.width + TILE - 1) // TILE
    d_mean2d, d_conic, d_color, d_alpha0 = _backward_kernel(
        camera.width,
        camera.height,
        n_tx,
        aux.tile_offsets,
        aux.tile_lists,
        aux.packed,
        aux.background,
        aux.t_final,
        aux.n_contrib,
        d_image,
        n,
    )
    aux.ndc_grad = d_mean2d * np.array([camera.width / 2.0, camera.height / 2.0])
    return project_backward(cloud, camera, proj, d_mean2d, d_conic, d_color, d_alpha0)


def tile_ranges(proj: Projected, camera: Camera) -> np.ndarray:
    """Inclusive tile rectangle (x0, x1, y0, y1) per Gaussian's 3-sigma box."""
    n_tx = (camera.width + TILE - 1) // TILE
    n_ty = (camera.height + TILE - 1) // TILE
    lo = np.floor((proj.mean2d - proj.radius) / TILE).astype(np.int64)
    hi = np.floor((proj.mean2d + proj.radius) / TILE).astype(np.int64)
    return np.stack(
        [np.maximum(lo[:, 0], 0), np.minimum(hi[:, 0], n_tx - 1), np.maximum(lo[:, 1], 0), np.minimum(hi[:, 1], n_ty - 1)],
        axis=1,
    )


def transmittance_image(aux: RenderAux) -> np.ndarray:
    """Final per-pixel transmittance as an 8-bit grayscale array (debug dumps)."""
    return np.round(np.clip(aux.t_final, 0.0, 1.0) * 255.0).astype(np.uint8)
