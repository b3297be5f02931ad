"""Training loop: sparse large-variance initialization, render -> loss ->
backward -> Adam, densification cadence, evaluation and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from splatfit.density import (
    DensifyConfig,
    DensifyStats,
    KEEP,
    apply_densify,
    densify_decision,
    prune_and_reset,
    record_views,
    reset_opacity,
)
from splatfit.edges import enhanced_edges
from splatfit.losses import LossConfig, ScheduleParams, total_loss
from splatfit.metrics import psnr
from splatfit.optim import Adam, exp_decay, renormalize_quats
from splatfit.raster import rasterize_backward, rasterize_forward
from splatfit.scene import GaussianCloud, load_checkpoint, logit, save_checkpoint
from splatfit.sh import MAX_DEGREE
from splatfit.synth import Scene

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "iter", "L", "L1", "L_geo", "L_app", "f", "L_dssim", "cloud_size", "train_psnr", "test_psnr",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class SLVInit:
    """Sparse-large-variance random initialization."""

    count: int = 100
    variance_scale: float = 0.5
    initial_opacity: float = 0.1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("initial count must be >= 1")
        if not self.variance_scale > 0:
            raise ValueError("variance_scale must be > 0")


def slv_initialize(init: SLVInit, bbox_min, bbox_max, seed: int) -> GaussianCloud:
    """``count`` Gaussians uniform in the box, isotropic with
    sigma = variance_scale * box_diagonal / count**(1/3), mid-gray."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    if not (hi > lo).all():
        raise ValueError("degenerate initialization box")
    rng = np.random.default_rng(seed)
    n = init.count
    means = rng.uniform(lo, hi, (n, 3))
    sigma = init.variance_scale * float(np.linalg.norm(hi - lo)) / n ** (1.0 / 3.0)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        means=means,
        log_scales=np.full((n, 3), np.log(sigma)),
        quats=quats,
        opacity_logits=np.full(n, float(logit(init.initial_opacity))),
        sh=np.zeros((n, 16, 3)),
        active_sh_degree=0,
    )


@dataclass
class LearningRates:
    position_init: float = 0.00016
    position_final: float = 0.0000016
    sh_dc: float = 0.0025
    sh_rest: float = 0.0025 / 20.0
    opacity: float = 0.05
    scale: float = 0.005
    rotation: float = 0.001


@dataclass
class TrainConfig:
    iterations: int = 7000
    lr: LearningRates = field(default_factory=LearningRates)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    steepness: float = 10.0
    decay_node: float = 0.25
    use_geometric: bool = True
    use_appearance: bool = True
    edge_radius: int = 2
    dssim_weight: float = 0.0
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    init: SLVInit = field(default_factory=SLVInit)
    seed: int = 0
    background: tuple | None = None
    max_sh_degree: int = MAX_DEGREE
    sh_interval: int = 1000
    eval_interval: int = 500
    checkpoint_iters: tuple = ()

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name, v in asdict(self.lr).items():
            if not v > 0:
                raise ValueError(f"learning rate {name} must be > 0")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            use_geometric=self.use_geometric,
            use_appearance=self.use_appearance,
            edge_radius=self.edge_radius,
            dssim_weight=self.dssim_weight,
            schedule=ScheduleParams(self.steepness, max(self.iterations, 1), self.decay_node),
        )


@dataclass
class TrainResult:
    cloud: GaussianCloud
    history: list[dict]
    initial_cloud: GaussianCloud


def metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({k: (int(v) if k in ("iter", "cloud_size") else float(v)) for k, v in rec.items()})
    return rows


def mean_psnr(cloud: GaussianCloud, scene: Scene, ids, background) -> float:
    if not ids:
        return float("nan")
    vals = []
    for i in ids:
        img, _ = rasterize_forward(cloud, scene.cameras[i], background)
        vals.append(psnr(np.clip(img, 0.0, 1.0), scene.images[i]))
    return float(np.mean(vals))


class Trainer:
    """Stateful training run; ``run`` advances to ``config.iterations``.

    All randomness flows through three seeded generators (initialization,
    camera order, split sampling), and the complete state can be saved and
    restored so a resumed run continues bit-identically.
    """

    def __init__(self, scene: Scene, config: TrainConfig, cloud: GaussianCloud | None = None):
        if len(scene.manifest.train_ids) < 2:
            raise TrainingError("need at least 2 training views")
        self.scene = scene
        self.config = config
        m = scene.manifest
        self.background = np.asarray(config.background if config.background is not None else m.background, dtype=np.float64)
        self.extent = m.scene_radius
        self.cloud = cloud if cloud is not None else slv_initialize(config.init, m.bbox_min, m.bbox_max, config.seed)
        self.initial_cloud = self.cloud.copy()
        self.adam = Adam(config.beta1, config.beta2, config.eps)
        self.stats = DensifyStats.zeros(len(self.cloud))
        self.view_rng = np.random.default_rng([config.seed, 1])
        self.split_rng = np.random.default_rng([config.seed, 2])
        self.queue: list[int] = []
        self.iteration = 0
        self.history: list[dict] = []
        self.loss_config = config.loss_config()
        self._gt_edges: dict[int, np.ndarray] = {}
        # optional observer called as on_render(iteration, view, image, aux)
        self.on_render: Callable | None = None

    # -- per-iteration pieces -------------------------------------------
    def next_view(self) -> int:
        if not self.queue:
            self.queue = [int(i) for i in self.view_rng.permutation(self.scene.manifest.train_ids)]
        return self.queue.pop(0)

    def learning_rates(self, it: int) -> dict[str, object]:
        lr, ext = self.config.lr, self.extent
        sh_lr = np.full((1, 16, 1), lr.sh_rest)
        sh_lr[0, 0, 0] = lr.sh_dc
        return {
            "means": exp_decay(it, lr.position_init * ext, lr.position_final * ext, self.config.iterations),
            "log_scales": lr.scale,
            "quats": lr.rotation,
            "opacity_logits": lr.opacity,
            "sh": sh_lr,
        }

    def gt_edges(self, view: int) -> np.ndarray | None:
        if not self.loss_config.use_geometric:
            return None
        if view not in self._gt_edges:
            self._gt_edges[view] = enhanced_edges(self.scene.images[view], self.loss_config.edge_radius)
        return self._gt_edges[view]

    def step(self) -> dict:
        cfg = self.config
        it = self.iteration + 1
        if cfg.sh_interval > 0 and it % cfg.sh_interval == 0:
            self.cloud.active_sh_degree = min(self.cloud.active_sh_degree + 1, cfg.max_sh_degree)

        view = self.next_view()
        cam = self.scene.cameras[view]
        gt = self.scene.images[view]
        image, aux = rasterize_forward(self.cloud, cam, self.background)
        if self.on_render is not None:
            self.on_render(it, view, image, aux)
        loss, d_image, comps = total_loss(gt, image, it, self.loss_config, self.gt_edges(view))
        grads = rasterize_backward(self.cloud, cam, aux, d_image)

        lrs = self.learning_rates(it)
        self.adam.step(self.cloud.params(), grads, lrs)
        renormalize_quats(self.cloud)

        dc = cfg.densify
        t_view = aux.blend_weight_sum if dc.t_reading == "blend_weight" else aux.transmittance_sum
        record_views(self.stats, aux.ndc_grad, t_view, aux.visible_mask)
        if it < dc.stop_iter:
            if it > dc.start_iter and it % dc.interval == 0:
                self.densify_and_prune(it, lrs["means"])
            if it % dc.opacity_reset_interval == 0 and not (it > dc.start_iter and it % dc.interval == 0):
                reset_opacity(self.cloud)
                self.adam.zero_rows("opacity_logits")
        self.iteration = it
        return {
            "iter": it,
            "L": comps.total,
            "L1": comps.l1,
            "L_geo": comps.geo,
            "L_app": comps.app,
            "f": comps.f,
            "L_dssim": comps.dssim,
        }

    def densify_and_prune(self, it: int, position_lr: float) -> None:
        dc = self.config.densify
        max_scales = np.exp(self.cloud.log_scales).max(axis=1)
        decisions = densify_decision(self.stats, max_scales, dc, self.extent)
        n_clone = n_split = 0
        if (decisions != KEEP).any():
            offset = -position_lr * self.adam.direction("means") if "means" in self.adam.m else None
            res = apply_densify(self.cloud, decisions, self.split_rng, offset)
            self.cloud = res.cloud
            self.adam.remap(res.origin)
            n_clone, n_split = res.n_clone, res.n_split
        before = len(self.cloud)
        try:
            self.cloud, kept, did_reset = prune_and_reset(self.cloud, it, dc, self.extent)
        except RuntimeError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from None
        self.adam.remap(kept)
        if did_reset:
            self.adam.zero_rows("opacity_logits")
        self.stats = DensifyStats.zeros(len(self.cloud))
        log.info(
            "densify iter=%d mode=%s clones=%d splits=%d pruned=%d size=%d",
            it, dc.mode, n_clone, n_split, before - len(kept), len(self.cloud),
        )

    def evaluate(self) -> tuple[float, float]:
        m = self.scene.manifest
        return (
            mean_psnr(self.cloud, self.scene, m.train_ids, self.background),
            mean_psnr(self.cloud, self.scene, m.test_ids, self.background),
        )

    # -- driver -------------------------------------------------------------
    def run(self, run_dir: Path | None = None, on_row: Callable[[dict], None] | None = None) -> TrainResult:
        cfg = self.config
        while self.iteration < cfg.iterations:
            row = self.step()
            it = self.iteration
            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                row["cloud_size"] = len(self.cloud)
                row["train_psnr"], row["test_psnr"] = self.evaluate()
                self.history.append(row)
                if on_row is not None:
                    on_row(row)
            if run_dir is not None and it in cfg.checkpoint_iters:
                self.save_state(Path(run_dir) / "checkpoints" / f"iter_{it:06d}")
        return TrainResult(self.cloud, self.history, self.initial_cloud)

    # -- persistence --------------------------------------------------------
    def save_state(self, prefix: Path) -> None:
        """Write ``prefix.ckpt`` (cloud) and ``prefix.state.npz`` (everything else)."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.cloud, prefix.with_suffix(".ckpt"))
        extra = {
            "iteration": np.array(self.iteration),
            "queue": np.array(self.queue, dtype=np.int64),
            "view_rng": np.array(json.dumps(self.view_rng.bit_generator.state)),
            "split_rng": np.array(json.dumps(self.split_rng.bit_generator.state)),
            "history": np.array(metrics_csv(self.history)),
            "stats.grad_norm_sum": self.stats.grad_norm_sum,
            "stats.weighted_grad_sum": self.stats.weighted_grad_sum,
            "stats.transmittance_sum": self.stats.transmittance_sum,
            "stats.view_count": self.stats.view_count,
            "initial": self.initial_cloud.to_records(),
        }
        extra.update({f"adam.{k}": v for k, v in self.adam.state().items()})
        fd, tmp = tempfile.mkstemp(dir=prefix.parent, suffix=".npz")
        os.close(fd)
        np.savez(tmp, **extra)
        os.replace(tmp, prefix.with_suffix(".state.npz"))

    @classmethod
    def resume(cls, scene: Scene, config: TrainConfig, prefix: Path) -> "Trainer":
        prefix = Path(prefix)
        cloud = load_checkpoint(prefix.with_suffix(".ckpt"))
        with np.load(prefix.with_suffix(".state.npz")) as z:
            state = {k: z[k] for k in z.files}
        tr = cls(scene, config, cloud)
        tr.initial_cloud = GaussianCloud.from_records(state["initial"])
        tr.iteration = int(state["iteration"])
        tr.queue = [int(i) for i in state["queue"]]
        tr.view_rng.bit_generator.state = json.loads(str(state["view_rng"]))
        tr.split_rng.bit_generator.state = json.loads(str(state["split_rng"]))
        tr.history = read_metrics_csv(str(state["history"]))
        tr.stats = DensifyStats(
            state["stats.grad_norm_sum"].copy(),
            state["stats.weighted_grad_sum"].copy(),
            state["stats.transmittance_sum"].copy(),
            state["stats.view_count"].copy(),
        )
        tr.adam.load_state({k[5:]: v for k, v in state.items() if k.startswith("adam.")})
        return tr


def train(scene: Scene, config: TrainConfig, run_dir: Path | None = None) -> TrainResult:
    """Train from SLV initialization for ``config.iterations`` steps."""
    return Trainer(scene, config).run(run_dir)


def with_iterations(config: TrainConfig, n: int) -> TrainConfig:
    return replace(config, iterations=n)
