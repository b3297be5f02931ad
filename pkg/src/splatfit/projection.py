"""EWA projection of 3D Gaussians to screen space, and its adjoint.

All functions are vectorized over the Gaussian axis. Pixel centers sit at
integer coordinates; NDC is ``2 * px / size - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatfit.scene import ActivatedGaussians, Camera, GaussianCloud, activate
from splatfit.sh import num_coeffs, sh_basis, sh_basis_grad

COV2D_BLUR = 0.3
FRUSTUM_SLACK = 1.3


@dataclass
class Projected:
    """Screen-space view of a whole cloud under one camera.

    Entries of culled Gaussians are left finite but meaningless; ``visible``
    tells which ones take part in rasterization.
    """

    visible: np.ndarray  # (N,) bool
    mean2d: np.ndarray  # (N, 2) pixels
    ndc: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2) with the blur term included
    conic: np.ndarray  # (N, 3) entries a, b, c of the inverse 2D covariance
    depth: np.ndarray  # (N,) camera-space z
    color: np.ndarray  # (N, 3)
    alpha0: np.ndarray  # (N,)
    radius: np.ndarray  # (N, 2) half extents of the 3-sigma box, pixels
    n_singular: int
    # cached for the backward pass
    act: ActivatedGaussians
    t_cam: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    sh_basis: np.ndarray
    color_clamped: np.ndarray
    sh_degree: int


def project(cloud: GaussianCloud, camera: Camera, act: ActivatedGaussians | None = None) -> Projected:
    if act is None:
        act = activate(cloud)
    n = len(cloud)
    rc = camera.rotation
    t_cam = act.means @ rc.T + camera.translation
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    in_front = z > camera.near
    zs = np.where(in_front, z, 1.0)
    fx, fy = camera.fx, camera.fy

    u = fx * x / zs + camera.cx
    v = fy * y / zs + camera.cy
    mean2d = np.stack([u, v], axis=1)
    ndc = np.stack([2.0 * u / camera.width - 1.0, 2.0 * v / camera.height - 1.0], axis=1)
    in_frustum = (np.abs(ndc) <= FRUSTUM_SLACK).all(axis=1)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / zs**2
    cov_cam = rc @ act.covariances @ rc.T
    cov2d = jac @ cov_cam @ jac.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    regular = det > 0
    dets = np.where(regular, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / dets, -cov2d[:, 0, 1] / dets, cov2d[:, 0, 0] / dets], axis=1)
    radius = 3.0 * np.sqrt(np.maximum(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1), 0.0))

    degree = cloud.active_sh_degree
    offs = act.means - camera.center
    dist = np.linalg.norm(offs, axis=1)
    dist = np.where(dist > 0, dist, 1.0)
    dirs = offs / dist[:, None]
    basis = sh_basis(dirs, degree)
    k = num_coeffs(degree)
    raw = np.einsum("nk,nkc->nc", basis[:, :k], act.sh[:, :k]) + 0.5
    clamped = raw < 0.0
    color = np.where(clamped, 0.0, raw)

    visible = in_front & in_frustum & regular
    return Projected(
        visible=visible,
        mean2d=mean2d,
        ndc=ndc,
        cov2d=cov2d,
        conic=conic,
        depth=z.copy(),
        color=color,
        alpha0=act.opacities,
        radius=radius,
        n_singular=int((in_front & in_frustum & ~regular).sum()),
        act=act,
        t_cam=t_cam,
        jac=jac,
        cov_cam=cov_cam,
        view_dirs=dirs,
        view_dist=dist,
        sh_basis=basis,
        color_clamped=clamped,
        sh_degree=degree,
    )


def _drot_dquat(q: np.ndarray) -> np.ndarray:
    """d R / d q for unit quaternions, shape (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = [[o, -2 * z, 2 * y], [2 * z, o, -2 * x], [-2 * y, 2 * x, o]]
    dx = [[o, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]]
    dy = [[-4 * y, 2 * x, 2 * w], [2 * x, o, 2 * z], [-2 * w, 2 * z, -4 * y]]
    dz = [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, o]]
    out = np.array([dw, dx, dy, dz])  # (4, 3, 3, N)
    return np.moveaxis(out, -1, 0)


def project_backward(
    cloud: GaussianCloud,
    camera: Camera,
    proj: Projected,
    d_mean2d: np.ndarray,
    d_conic: np.ndarray,
    d_color: np.ndarray,
    d_alpha0: np.ndarray,
) -> dict[str, np.ndarray]:
    """Chain screen-space gradients back to raw cloud parameters.

    ``d_conic`` holds dL/da, dL/db, dL/dc where the Mahalanobis power is
    ``a dx^2 + 2 b dx dy + c dy^2``.
    """
    act = proj.act
    vis = proj.visible
    fx, fy = camera.fx, camera.fy
    rc = camera.rotation
    x, y = proj.t_cam[:, 0], proj.t_cam[:, 1]
    z = np.where(vis, proj.t_cam[:, 2], 1.0)

    d_logit = d_alpha0 * act.opacities * (1.0 - act.opacities)

    # color -> sh coefficients and view direction
    degree = proj.sh_degree
    k = num_coeffs(degree)
    d_raw = np.where(proj.color_clamped, 0.0, d_color)
    d_sh = np.zeros_like(cloud.sh)
    d_sh[:, :k] = proj.sh_basis[:, :k, None] * d_raw[:, None, :]
    d_means = np.zeros_like(cloud.means)
    if degree > 0:
        bgrad = sh_basis_grad(proj.view_dirs, degree)[:, :k]
        d_basis = np.einsum("nc,nkc->nk", d_raw, act.sh[:, :k])
        d_dir = np.einsum("nk,nkd->nd", d_basis, bgrad)
        dirs = proj.view_dirs
        radial = np.sum(dirs * d_dir, axis=1, keepdims=True)
        d_means += (d_dir - dirs * radial) / proj.view_dist[:, None]

    # conic -> 2D covariance
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    qmat = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    gq = np.stack(
        [
            np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
            np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1),
        ],
        -2,
    )
    g_cov2d = -qmat @ gq @ qmat

    # 2D covariance -> camera covariance and projection Jacobian
    jac = proj.jac
    g_covcam = jac.transpose(0, 2, 1) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ proj.cov_cam
    g_sigma = rc.T @ g_covcam @ rc

    # world covariance -> scale and rotation
    rot, scales = act.rotations, act.scales
    lmat = rot * scales[:, None, :]
    g_l = 2.0 * g_sigma @ lmat
    g_rot = g_l * scales[:, None, :]
    g_scale = np.sum(g_l * rot, axis=1)
    d_log_scales = g_scale * scales
    qnorm = np.linalg.norm(cloud.quats, axis=1, keepdims=True)
    qhat = cloud.quats / qnorm
    g_qhat = np.einsum("nkij,nij->nk", _drot_dquat(qhat), g_rot)
    d_quats = (g_qhat - qhat * np.sum(qhat * g_qhat, axis=1, keepdims=True)) / qnorm

    # camera-space position from both the Jacobian and the projected mean
    gu, gv = d_mean2d[:, 0], d_mean2d[:, 1]
    z2, z3 = z * z, z * z * z
    d_t = np.zeros_like(proj.t_cam)
    d_t[:, 0] = gu * fx / z - g_jac[:, 0, 2] * fx / z2
    d_t[:, 1] = gv * fy / z - g_jac[:, 1, 2] * fy / z2
    d_t[:, 2] = (
        -gu * fx * x / z2
        - gv * fy * y / z2
        - g_jac[:, 0, 0] * fx / z2
        + g_jac[:, 0, 2] * 2 * fx * x / z3
        - g_jac[:, 1, 1] * fy / z2
        + g_jac[:, 1, 2] * 2 * fy * y / z3
    )
    d_means += d_t @ rc

    mask = vis.astype(np.float64)
    return {
        "means": d_means * mask[:, None],
        "log_scales": d_log_scales * mask[:, None],
        "quats": d_quats * mask[:, None],
        "opacity_logits": d_logit * mask,
        "sh": d_sh * mask[:, None, None],
    }
