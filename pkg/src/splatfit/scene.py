"""Scene representation: Gaussian clouds, pinhole cameras, checkpoints.

A cloud is stored structure-of-arrays: every per-Gaussian quantity is a
numpy array whose first axis indexes Gaussians. Raw parameters are kept
unconstrained; ``activate`` maps them to means, covariances, opacities.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from splatfit.sh import MAX_DEGREE

RECORD_FLOATS = 3 + 3 + 4 + 1 + 48
CHECKPOINT_MAGIC = b"SPLATCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQII")


class SceneError(ValueError):
    """Invalid scene data: non-finite parameters, malformed files, bad cameras."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


class Gaussian3D(NamedTuple):
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray


@dataclass
class GaussianCloud:
    """Optimizable Gaussian scene.

    Attributes:
        means: (N, 3) world positions.
        log_scales: (N, 3) log of per-axis standard deviation.
        quats: (N, 4) rotation quaternions, (w, x, y, z).
        opacity_logits: (N,) pre-sigmoid opacity.
        sh: (N, 16, 3) spherical-harmonics coefficients per color channel.
        active_sh_degree: bands in use, 0..3.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    active_sh_degree: int = 0

    PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh")

    def __post_init__(self):
        n = self.means.shape[0]
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.shape[1] < 16:
            full = np.zeros((n, 16, 3))
            full[:, : sh.shape[1]] = sh
            sh = full
        self.sh = np.ascontiguousarray(sh)
        if not 0 <= self.active_sh_degree <= MAX_DEGREE:
            raise SceneError(f"active_sh_degree {self.active_sh_degree} outside [0, {MAX_DEGREE}]")

    def __len__(self) -> int:
        return self.means.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            **{k: v.copy() for k, v in self.params().items()},
            active_sh_degree=self.active_sh_degree,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(),
            self.log_scales[i].copy(),
            self.quats[i].copy(),
            float(self.opacity_logits[i]),
            self.sh[i].copy(),
        )

    def select(self, mask_or_index) -> "GaussianCloud":
        return GaussianCloud(
            **{k: v[mask_or_index].copy() for k, v in self.params().items()},
            active_sh_degree=self.active_sh_degree,
        )

    def extend(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()},
            active_sh_degree=self.active_sh_degree,
        )

    def to_records(self) -> np.ndarray:
        """Flat (N, 59) array: position, log_scale, quaternion, opacity_logit, sh."""
        n = len(self)
        return np.concatenate(
            [
                self.means,
                self.log_scales,
                self.quats,
                self.opacity_logits[:, None],
                self.sh.reshape(n, 48),
            ],
            axis=1,
        )

    @classmethod
    def from_records(cls, records: np.ndarray, active_sh_degree: int = 0) -> "GaussianCloud":
        records = np.asarray(records, dtype=np.float64)
        if records.ndim != 2 or records.shape[1] != RECORD_FLOATS:
            raise SceneError(f"expected (N, {RECORD_FLOATS}) records, got {records.shape}")
        return cls(
            means=records[:, 0:3],
            log_scales=records[:, 3:6],
            quats=records[:, 6:10],
            opacity_logits=records[:, 10],
            sh=records[:, 11:].reshape(-1, 16, 3),
            active_sh_degree=active_sh_degree,
        )

    def check_finite(self) -> None:
        n = len(self)
        bad = np.zeros(n, dtype=bool)
        for arr in self.params().values():
            bad |= ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
        if bad.any():
            idx = np.flatnonzero(bad)
            raise SceneError(f"non-finite parameters in Gaussian(s) {idx[:10].tolist()}")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose (x right, y down, z forward)."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    name: str = field(default="")

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise SceneError("camera rotation is not orthonormal")
        if self.width < 16 or self.height < 16:
            raise SceneError(f"camera resolution {self.width}x{self.height} below 16 px")
        if not 0 < self.near < self.far:
            raise SceneError(f"need 0 < near < far, got near={self.near} far={self.far}")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, **kw) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            rotation=rot,
            translation=-rot @ eye,
            fx=fx,
            fy=fy,
            cx=kw.pop("cx", width / 2.0),
            cy=kw.pop("cy", height / 2.0),
            width=width,
            height=height,
            **kw,
        )


class ActivatedGaussians(NamedTuple):
    means: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray


def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; input is normalized first."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def activate(cloud: GaussianCloud) -> ActivatedGaussians:
    """Map raw parameters to mean, covariance R diag(s^2) R^T, opacity."""
    cloud.check_finite()
    if (np.linalg.norm(cloud.quats, axis=1) == 0).any():
        idx = np.flatnonzero(np.linalg.norm(cloud.quats, axis=1) == 0)
        raise SceneError(f"zero-norm quaternion in Gaussian(s) {idx[:10].tolist()}")
    scales = np.exp(cloud.log_scales)
    if not np.isfinite(scales).all():
        idx = np.flatnonzero(~np.isfinite(scales).all(axis=1))
        raise SceneError(f"scale overflow in Gaussian(s) {idx[:10].tolist()}")
    rot = quat_to_rotmat(cloud.quats)
    m = rot * scales[:, None, :]
    cov = m @ m.transpose(0, 2, 1)
    return ActivatedGaussians(
        means=cloud.means,
        covariances=cov,
        opacities=sigmoid(cloud.opacity_logits),
        sh=cloud.sh,
        rotations=rot,
        scales=scales,
    )


def save_checkpoint(cloud: GaussianCloud, path) -> None:
    """Write the binary checkpoint atomically (temp file + rename)."""
    records = np.ascontiguousarray(cloud.to_records(), dtype="<f8")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(cloud), cloud.active_sh_degree, RECORD_FLOATS
    )
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise SceneError(f"{path}: truncated checkpoint header")
    magic, version, count, degree, width = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise SceneError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise SceneError(f"{path}: unsupported checkpoint version {version}")
    if width != RECORD_FLOATS:
        raise SceneError(f"{path}: record width {width}, expected {RECORD_FLOATS}")
    body = raw[_HEADER.size:]
    if len(body) != count * width * 8:
        raise SceneError(f"{path}: expected {count} records, file size disagrees")
    records = np.frombuffer(body, dtype="<f8").reshape(count, width).astype(np.float64)
    return GaussianCloud.from_records(records, active_sh_degree=degree)
