"""Synthetic ground-truth scenes: a known Gaussian cloud, a camera rig and
the images it renders, written to a self-describing directory.

Layout::

    manifest.txt
    images/cam_0000.ppm ...
    reference.ckpt
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from splatfit.imageio import ImageFormatError, read_image, write_image
from splatfit.raster import rasterize_forward
from splatfit.scene import Camera, GaussianCloud, SceneError, load_checkpoint, logit, save_checkpoint
from splatfit.sh import rgb_to_dc

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "splatfit-scene"
MANIFEST_VERSION = 1
TEST_EVERY = 8


@dataclass(frozen=True)
class SceneSpec:
    n_gaussians: int = 50
    rig: str = "orbit"
    n_cameras: int = 24
    resolution: int = 128
    seed: int = 0
    # orbit: radius of the camera circle; grid: distance of the rig plane
    distance: float = 4.0
    elevation_deg: float = 20.0
    # grid rig: half width of the camera plane, world units
    spread: float = 0.4
    focal_factor: float = 1.2
    background: tuple = (0.0, 0.0, 0.0)
    image_ext: str = ".ppm"

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.n_gaussians < 1:
            raise ValueError("need at least 1 Gaussian")
        if self.rig not in ("orbit", "grid"):
            raise ValueError(f"unknown rig {self.rig!r}")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")


@dataclass
class SceneManifest:
    cameras: list[Camera]
    image_paths: list[str]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    scene_radius: float
    background: np.ndarray
    reference: str | None = None
    root: Path | None = field(default=None, compare=False)

    def __eq__(self, other):
        if not isinstance(other, SceneManifest):
            return NotImplemented
        return (
            self.image_paths == other.image_paths
            and self.reference == other.reference
            and self.scene_radius == other.scene_radius
            and np.array_equal(self.bbox_min, other.bbox_min)
            and np.array_equal(self.bbox_max, other.bbox_max)
            and np.array_equal(self.background, other.background)
            and len(self.cameras) == len(other.cameras)
            and all(_camera_equal(a, b) for a, b in zip(self.cameras, other.cameras))
        )

    @property
    def test_ids(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i % TEST_EVERY == 0]

    @property
    def train_ids(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i % TEST_EVERY != 0]

    def camera_index(self, name: str) -> int:
        for i, cam in enumerate(self.cameras):
            if cam.name == name:
                return i
        raise KeyError(f"unknown camera {name!r}")


@dataclass
class Scene:
    manifest: SceneManifest
    images: list[np.ndarray]

    @property
    def cameras(self) -> list[Camera]:
        return self.manifest.cameras


def _camera_equal(a: Camera, b: Camera) -> bool:
    return (
        np.array_equal(a.rotation, b.rotation)
        and np.array_equal(a.translation, b.translation)
        and (a.fx, a.fy, a.cx, a.cy, a.width, a.height, a.near, a.far, a.name)
        == (b.fx, b.fy, b.cx, b.cy, b.width, b.height, b.near, b.far, b.name)
    )


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def reference_cloud(spec: SceneSpec, rng: np.random.Generator) -> GaussianCloud:
    """Clustered, anisotropic, mostly opaque Gaussians with degree-1 colors."""
    n = spec.n_gaussians
    n_clusters = max(1, min(5, n // 10))
    centers = rng.uniform(-0.6, 0.6, (n_clusters, 3))
    assign = rng.integers(0, n_clusters, n)
    means = centers[assign] + rng.normal(0.0, 0.25, (n, 3))
    log_scales = np.log(rng.uniform(0.03, 0.18, (n, 3)))
    quats = random_rotations(rng, n)
    opacity = rng.uniform(0.6, 0.95, n)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rgb_to_dc(rng.uniform(0.1, 0.9, (n, 3)))
    sh[:, 1:4] = rng.normal(0.0, 0.1, (n, 3, 3))
    return GaussianCloud(means, log_scales, quats, logit(opacity), sh, active_sh_degree=1)


def make_rig(spec: SceneSpec, target: np.ndarray) -> list[Camera]:
    res = spec.resolution
    f = spec.focal_factor * res
    cams = []
    if spec.rig == "orbit":
        elev = math.radians(spec.elevation_deg)
        for k in range(spec.n_cameras):
            az = 2.0 * math.pi * k / spec.n_cameras
            # y is "down" in camera space; the rig lives above the scene at -y
            offset = spec.distance * np.array(
                [math.cos(elev) * math.cos(az), -math.sin(elev), math.cos(elev) * math.sin(az)]
            )
            cams.append(Camera.look_at(target + offset, target, (0.0, -1.0, 0.0), f, f, res, res, name=f"cam_{k:04d}"))
    else:
        cols = math.ceil(math.sqrt(spec.n_cameras))
        rows = math.ceil(spec.n_cameras / cols)
        for k in range(spec.n_cameras):
            r, c = divmod(k, cols)
            u = (c / max(cols - 1, 1) - 0.5) * 2.0 * spec.spread
            v = (r / max(rows - 1, 1) - 0.5) * 2.0 * spec.spread
            eye = target + np.array([u, v, -spec.distance])
            cams.append(Camera.look_at(eye, target, (0.0, -1.0, 0.0), f, f, res, res, name=f"cam_{k:04d}"))
    return cams


def camera_radius(cameras: list[Camera]) -> float:
    """1.1 x the largest distance of a camera center from the rig centroid."""
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


def generate_scene(spec: SceneSpec, out_dir) -> Scene:
    """Build a scene and write it to ``out_dir`` (created if needed)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    cloud = reference_cloud(spec, rng)
    target = cloud.means.mean(axis=0)
    cameras = make_rig(spec, target)
    bg = np.asarray(spec.background, dtype=np.float64)

    images, paths = [], []
    for cam in cameras:
        img, _ = rasterize_forward(cloud, cam, bg)
        rel = f"images/{cam.name}{spec.image_ext}"
        write_image(out / rel, img)
        images.append(read_image(out / rel))
        paths.append(rel)
    save_checkpoint(cloud, out / "reference.ckpt")

    margin = 3.0 * np.exp(cloud.log_scales).max()
    manifest = SceneManifest(
        cameras=cameras,
        image_paths=paths,
        bbox_min=cloud.means.min(axis=0) - margin,
        bbox_max=cloud.means.max(axis=0) + margin,
        scene_radius=camera_radius(cameras),
        background=bg,
        reference="reference.ckpt",
        root=out,
    )
    (out / MANIFEST_NAME).write_text(format_manifest(manifest))
    return Scene(manifest, images)


def _vec(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def format_manifest(m: SceneManifest) -> str:
    lines = [
        f"{MANIFEST_HEADER} {MANIFEST_VERSION}",
        f"n_cameras = {len(m.cameras)}",
        f"scene_radius = {m.scene_radius!r}",
        f"bbox_min = {_vec(m.bbox_min)}",
        f"bbox_max = {_vec(m.bbox_max)}",
        f"background = {_vec(m.background)}",
    ]
    if m.reference:
        lines.append(f"reference = {m.reference}")
    for i, (cam, path) in enumerate(zip(m.cameras, m.image_paths)):
        lines += [
            "",
            f"[camera {i}]",
            f"name = {cam.name}",
            f"image = {path}",
            f"width = {cam.width}",
            f"height = {cam.height}",
            f"fx = {cam.fx!r}",
            f"fy = {cam.fy!r}",
            f"cx = {cam.cx!r}",
            f"cy = {cam.cy!r}",
            f"near = {cam.near!r}",
            f"far = {cam.far!r}",
            f"rotation = {_vec(cam.rotation)}",
            f"translation = {_vec(cam.translation)}",
        ]
    return "\n".join(lines) + "\n"


_CAMERA_KEYS = {"name", "image", "width", "height", "fx", "fy", "cx", "cy", "near", "far", "rotation", "translation"}
_GLOBAL_KEYS = {"n_cameras", "scene_radius", "bbox_min", "bbox_max", "background", "reference"}


def parse_manifest(text: str, root: Path | None = None) -> SceneManifest:
    lines = text.splitlines()
    if not lines or lines[0].split() != [MANIFEST_HEADER, str(MANIFEST_VERSION)]:
        raise SceneError("manifest: missing or unsupported version header")
    head: dict[str, str] = {}
    blocks: list[dict[str, str]] = []
    current = head
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[camera"):
            current = {}
            blocks.append(current)
            continue
        if "=" not in line:
            raise SceneError(f"manifest line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        allowed = _GLOBAL_KEYS if current is head else _CAMERA_KEYS
        if key not in allowed:
            raise SceneError(f"manifest line {lineno}: unknown key {key!r}")
        current[key] = value
    try:
        n = int(head["n_cameras"])
        floats = lambda s: np.array([float(v) for v in s.split()])  # noqa: E731
        cameras, paths = [], []
        for b in blocks:
            cameras.append(
                Camera(
                    rotation=floats(b["rotation"]),
                    translation=floats(b["translation"]),
                    fx=float(b["fx"]),
                    fy=float(b["fy"]),
                    cx=float(b["cx"]),
                    cy=float(b["cy"]),
                    width=int(b["width"]),
                    height=int(b["height"]),
                    near=float(b["near"]),
                    far=float(b["far"]),
                    name=b["name"],
                )
            )
            paths.append(b["image"])
        manifest = SceneManifest(
            cameras=cameras,
            image_paths=paths,
            bbox_min=floats(head["bbox_min"]),
            bbox_max=floats(head["bbox_max"]),
            scene_radius=float(head["scene_radius"]),
            background=floats(head["background"]),
            reference=head.get("reference"),
            root=root,
        )
    except KeyError as exc:
        raise SceneError(f"manifest: missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise SceneError(f"manifest: {exc}") from None
    if len(cameras) != n:
        raise SceneError(f"manifest declares {n} cameras but has {len(cameras)} blocks")
    if n < 2:
        raise SceneError("manifest needs at least 2 cameras")
    return manifest


def load_scene(path) -> Scene:
    """Load and validate a scene directory (or its manifest file)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise SceneError(f"missing manifest: {mpath}")
    manifest = parse_manifest(mpath.read_text(), root)
    images = []
    for cam, rel in zip(manifest.cameras, manifest.image_paths):
        ipath = root / rel
        if not ipath.exists():
            raise SceneError(f"missing image file: {ipath}")
        try:
            img = read_image(ipath)
        except ImageFormatError as exc:
            raise SceneError(str(exc)) from None
        if img.ndim != 3 or img.shape != (cam.height, cam.width, 3):
            raise SceneError(f"{ipath}: image shape {img.shape} does not match camera {cam.width}x{cam.height}")
        if not ((img >= 0.0) & (img <= 1.0)).all():
            raise SceneError(f"{ipath}: pixel values outside [0, 1]")
        images.append(img)
    if manifest.reference and not (root / manifest.reference).exists():
        raise SceneError(f"missing reference checkpoint: {root / manifest.reference}")
    return Scene(manifest, images)


def load_reference(scene: Scene) -> GaussianCloud:
    m = scene.manifest
    if not m.reference:
        raise SceneError("scene has no reference checkpoint")
    return load_checkpoint(m.root / m.reference)
