"""Command-line entry point.

    splatfit synth   --out DIR [--seed S --n-gaussians N --n-cameras C ...]
    splatfit train   --scene DIR --run DIR [--mode M] [--config F] [--key value ...]
    splatfit render  --checkpoint F --scene DIR --out DIR [--cameras test|train|all|LIST]
    splatfit eval    --scene DIR (--run DIR | --checkpoint F) [--csv F]
    splatfit ablate  --scene DIR --out DIR [--config F] [--key value ...]

Exit codes: 0 success, 1 runtime failure, 2 usage error. Tables and data go
to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from splatfit import __version__
from splatfit.config import KEYS, MODES, ConfigError, RunConfig, resolve_run_dir
from splatfit.edges import enhanced_edges
from splatfit.imageio import ImageFormatError, write_gray_u8, write_image
from splatfit.losses import appearance_weights, geometric_weights
from splatfit.metrics import MetricReport, evaluate
from splatfit.raster import RenderError, rasterize_forward, transmittance_image
from splatfit.scene import GaussianCloud, SceneError, load_checkpoint
from splatfit.synth import Scene, SceneSpec, generate_scene, load_scene
from splatfit.train import Trainer, TrainingError, metrics_csv

log = logging.getLogger("splatfit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
RUNTIME_ERRORS = (TrainingError, SceneError, RenderError, ImageFormatError, OSError, RuntimeError)


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def version_string() -> str:
    desc = ""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            desc = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"splatfit {__version__}" + (f" ({desc})" if desc else "")


def cloud_digest(cloud: GaussianCloud) -> str:
    return hashlib.sha256(cloud.to_records().tobytes()).hexdigest()


def _load_scene(path) -> Scene:
    try:
        return load_scene(path)
    except (SceneError, ImageFormatError, OSError) as exc:
        raise SceneError(str(exc)) from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (nested or dotted keys)")
    p.add_argument("--mode", dest="mode", choices=list(MODES), help=KEYS["mode"].help)
    group = p.add_argument_group("configuration keys")
    for key, spec in KEYS.items():
        if key == "mode":
            continue
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V", help=f"{spec.help} (default {spec.default!r})")


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    try:
        return RunConfig.load(args.config, overrides)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def select_cameras(scene: Scene, selector: str) -> list[int]:
    m = scene.manifest
    if selector == "test":
        return m.test_ids
    if selector == "train":
        return m.train_ids
    if selector == "all":
        return list(range(len(m.cameras)))
    ids = []
    for tok in selector.split(","):
        tok = tok.strip()
        if tok.isdigit():
            i = int(tok)
            if i >= len(m.cameras):
                raise UsageError(f"unknown camera id {i} (scene has {len(m.cameras)})")
            ids.append(i)
        else:
            try:
                ids.append(m.camera_index(tok))
            except KeyError:
                raise UsageError(f"unknown camera {tok!r}") from None
    return ids


def evaluate_cloud(cloud: GaussianCloud, scene: Scene, ids, background) -> MetricReport:
    def pairs():
        for i in ids:
            img, _ = rasterize_forward(cloud, scene.cameras[i], background)
            yield scene.cameras[i].name or f"cam_{i:04d}", img, scene.images[i]

    return evaluate(pairs())


class DebugDumper:
    """Writes T_final, edge maps and both weight maps every ``every`` iterations."""

    def __init__(self, trainer: Trainer, out: Path, every: int):
        self.trainer, self.out, self.every = trainer, out, every

    def __call__(self, it, view, image, aux):
        if it % self.every:
            return
        tr = self.trainer
        gt = tr.scene.images[view]
        render = np.clip(image, 0.0, 1.0)
        r = tr.loss_config.edge_radius
        d = self.out / f"iter_{it:06d}_cam_{view:04d}"
        d.mkdir(parents=True, exist_ok=True)
        write_gray_u8(d / "t_final.pgm", transmittance_image(aux))
        for name, arr in (
            ("edges_gt", enhanced_edges(gt, r)),
            ("edges_render", enhanced_edges(render, r)),
            ("w_geo", geometric_weights(gt, render, r)),
            ("w_app", appearance_weights(gt, render).max(axis=2)),
        ):
            peak = arr.max()
            write_gray_u8(d / f"{name}.pgm", np.round(255 * (arr / peak if peak > 0 else arr)).astype(np.uint8))
        write_image(d / "render.ppm", render)


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    extra = {"distance": args.distance} if args.distance is not None else {}
    try:
        spec = SceneSpec(
            n_gaussians=args.n_gaussians,
            rig=args.rig,
            n_cameras=args.n_cameras,
            resolution=args.resolution,
            seed=args.seed,
            elevation_deg=args.elevation,
            spread=args.spread,
            background=tuple(args.background),
            image_ext=".png" if args.png else ".ppm",
            **extra,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = resolve_run_dir(args.out)
    scene = generate_scene(spec, out)
    m = scene.manifest
    print(f"scene\t{out}")
    print(f"gaussians\t{spec.n_gaussians}")
    print(f"cameras\t{len(m.cameras)}")
    print(f"test_views\t{len(m.test_ids)}")
    print(f"scene_radius\t{m.scene_radius!r}")
    return EXIT_OK


def _prepare_run(run_dir: Path, cfg: RunConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "config.json", cfg.to_json())
    _atomic_write(run_dir / "VERSION", version_string() + "\n")


def run_training(scene: Scene, cfg: RunConfig, run_dir: Path, resume: Path | None = None, dump_every: int = 0) -> Trainer:
    """Train one configuration into ``run_dir``; shared by train and ablate."""
    tc = cfg.to_train_config()
    _prepare_run(run_dir, cfg)
    trainer = Trainer.resume(scene, tc, resume) if resume is not None else Trainer(scene, tc)
    if dump_every > 0:
        trainer.on_render = DebugDumper(trainer, run_dir / "debug", dump_every)
    csv_path = run_dir / "metrics.csv"

    def on_row(row):
        log.info(
            "iter=%d L=%.6g L1=%.6g L_geo=%.6g L_app=%.6g f=%.4f size=%d train_psnr=%.3f test_psnr=%.3f",
            row["iter"], row["L"], row["L1"], row["L_geo"], row["L_app"], row["f"],
            row["cloud_size"], row["train_psnr"], row["test_psnr"],
        )
        _atomic_write(csv_path, metrics_csv(trainer.history))

    result = trainer.run(run_dir, on_row)
    _atomic_write(csv_path, metrics_csv(result.history))
    trainer.save_state(run_dir / "checkpoints" / "final")
    _atomic_write(run_dir / "initial.sha256", cloud_digest(result.initial_cloud) + "\n")

    report = evaluate_cloud(result.cloud, scene, scene.manifest.test_ids, trainer.background)
    _atomic_write(run_dir / "eval.csv", report.to_csv())
    renders = run_dir / "renders"
    renders.mkdir(exist_ok=True)
    for i in scene.manifest.test_ids:
        img, _ = rasterize_forward(result.cloud, scene.cameras[i], trainer.background)
        write_image(renders / f"cam_{i:04d}.ppm", np.clip(img, 0.0, 1.0))
    return trainer


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scene = _load_scene(args.scene)
    run_dir = resolve_run_dir(args.run)
    resume = Path(args.resume) if args.resume else None
    if resume is not None:
        resume = resume.with_suffix("") if resume.suffix in (".ckpt",) else resume
        if not resume.with_suffix(".ckpt").exists():
            raise SceneError(f"missing checkpoint: {resume.with_suffix('.ckpt')}")
    trainer = run_training(scene, cfg, run_dir, resume, args.dump_every)
    last = trainer.history[-1] if trainer.history else None
    print(f"run\t{run_dir}")
    print(f"iterations\t{trainer.iteration}")
    print(f"cloud_size\t{len(trainer.cloud)}")
    if last:
        print(f"train_psnr\t{last['train_psnr']:.4f}")
        print(f"test_psnr\t{last['test_psnr']:.4f}")
    return EXIT_OK


def _background(args, scene: Scene):
    if args.background is not None:
        return np.asarray(args.background, dtype=np.float64)
    return scene.manifest.background


def cmd_render(args) -> int:
    scene = _load_scene(args.scene)
    ids = select_cameras(scene, args.cameras)
    cloud = load_checkpoint(args.checkpoint)
    out = resolve_run_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".png" if args.png else ".ppm"
    bg = _background(args, scene)
    for i in ids:
        img, _ = rasterize_forward(cloud, scene.cameras[i], bg)
        path = out / f"cam_{i:04d}{ext}"
        write_image(path, np.clip(img, 0.0, 1.0))
        print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    scene = _load_scene(args.scene)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    elif args.run:
        ckpt = resolve_run_dir(args.run) / "checkpoints" / "final.ckpt"
    else:
        ckpt = None
    if ckpt is None:
        raise UsageError("eval needs --run or --checkpoint")
    if not ckpt.exists():
        raise SceneError(f"missing checkpoint: {ckpt}")
    cloud = load_checkpoint(ckpt)
    ids = select_cameras(scene, args.cameras)
    report = evaluate_cloud(cloud, scene, ids, _background(args, scene))
    print(report.to_table())
    if args.csv:
        _atomic_write(Path(args.csv), report.to_csv())
    elif args.run:
        _atomic_write(resolve_run_dir(args.run) / "eval.csv", report.to_csv())
    return EXIT_OK


def ablation_table(rows: list[tuple[str, float, float]]) -> str:
    lines = [f"{'mode':<12}  {'PSNR':>8}  {'SSIM':>6}"]
    lines += [f"{m:<12}  {p:8.3f}  {s:6.4f}" for m, p, s in rows]
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    base = _run_config(args)
    scene = _load_scene(args.scene)
    out = resolve_run_dir(args.out)
    rows, digests = [], {}
    for mode in MODES:
        log.info("ablation arm %s", mode)
        tr = run_training(scene, base.with_mode(mode), out / mode)
        digests[mode] = cloud_digest(tr.initial_cloud)
        report = evaluate_cloud(tr.cloud, scene, scene.manifest.test_ids, tr.background)
        rows.append((mode, report.mean_psnr, report.mean_ssim))
    if len(set(digests.values())) != 1:
        raise TrainingError(f"ablation arms started from different clouds: {digests}")
    lines = ["mode,psnr,ssim"] + [f"{m},{p!r},{s!r}" for m, p, s in rows]
    _atomic_write(out / "ablation.csv", "\n".join(lines) + "\n")
    _atomic_write(out / "initial.sha256", next(iter(digests.values())) + "\n")
    print(ablation_table(rows))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatfit", description="Gaussian splatting trainer with attention losses.")
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-gaussians", type=int, default=50)
    s.add_argument("--n-cameras", type=int, default=24)
    s.add_argument("--rig", choices=["orbit", "grid"], default="orbit")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--distance", type=float, help="orbit radius or grid-plane distance")
    s.add_argument("--elevation", type=float, default=20.0, help="orbit elevation, degrees")
    s.add_argument("--spread", type=float, default=0.4, help="grid half width, world units")
    s.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--png", action="store_true", help="write PNG instead of PPM")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a cloud on a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--run", required=True, help="run directory (relative to $SPLATFIT_RUN_ROOT if set)")
    t.add_argument("--resume", help="checkpoint prefix to resume from (…/iter_000300)")
    t.add_argument("--dump-every", type=int, default=0, help="write debug maps every K iterations")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--cameras", default="test", help="test | train | all | comma list of ids or names")
    r.add_argument("--background", type=float, nargs=3)
    r.add_argument("--png", action="store_true")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report")
    e.add_argument("--scene", required=True)
    e.add_argument("--run")
    e.add_argument("--checkpoint")
    e.add_argument("--cameras", default="test")
    e.add_argument("--csv", help="also write the report as CSV here")
    e.add_argument("--background", type=float, nargs=3)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train all four modes and compare")
    a.add_argument("--scene", required=True)
    a.add_argument("--out", required=True)
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
