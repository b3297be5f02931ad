"""Run configuration: a flat table of namespaced keys (``densify.mode``,
``schedule.m``, ``edge.radius`` ...) filled from defaults, an optional JSON
file and command-line overrides, then resolved into a ``TrainConfig``.

Precedence: defaults < config file < flags. Unknown keys are rejected.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from splatfit.density import DensifyConfig
from splatfit.train import LearningRates, SLVInit, TrainConfig

RUN_ROOT_ENV = "SPLATFIT_RUN_ROOT"

# ablation ladder: mode -> (geometric term, appearance term, densify criterion)
MODES: dict[str, tuple[bool, bool, str]] = {
    "baseline": (False, False, "baseline"),
    "geo": (True, False, "baseline"),
    "geo+opacity": (True, False, "opacity_weighted"),
    "full": (True, True, "opacity_weighted"),
}


class ConfigError(ValueError):
    pass


def _int_list(v: Any) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    s = str(v).strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()


def _color(v: Any):
    if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none", "scene")):
        return None
    vals = [float(x) for x in (v if isinstance(v, (list, tuple)) else str(v).split(","))]
    if len(vals) != 3:
        raise ValueError(f"background needs 3 components, got {len(vals)}")
    return tuple(vals)


def _opt_int(v: Any):
    if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none", "auto")):
        return None
    return int(v)


def _choice(*options: str) -> Callable[[Any], str]:
    def parse(v: Any) -> str:
        s = str(v)
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {s!r}")
        return s

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    help: str


_LR = LearningRates()
_DC = DensifyConfig()
_INIT = SLVInit()
_TC = TrainConfig()

KEYS: dict[str, Key] = {
    "mode": Key(_choice(*MODES), "full", "ablation mode: baseline | geo | geo+opacity | full"),
    "train.iterations": Key(int, _TC.iterations, "total iterations N"),
    "train.seed": Key(int, _TC.seed, "seed for initialization, view order and split sampling"),
    "train.eval_interval": Key(int, _TC.eval_interval, "iterations between metric rows"),
    "train.checkpoint_iters": Key(_int_list, (), "comma-separated iterations to checkpoint at"),
    "train.background": Key(_color, None, "r,g,b background; default: the scene's"),
    "train.max_sh_degree": Key(int, _TC.max_sh_degree, "highest SH degree"),
    "train.sh_interval": Key(int, _TC.sh_interval, "iterations between SH degree increases"),
    "lr.position_init": Key(float, _LR.position_init, "initial position lr (times scene radius)"),
    "lr.position_final": Key(float, _LR.position_final, "final position lr (times scene radius)"),
    "lr.sh_dc": Key(float, _LR.sh_dc, "lr of the SH DC band"),
    "lr.sh_rest": Key(float, _LR.sh_rest, "lr of higher SH bands"),
    "lr.opacity": Key(float, _LR.opacity, "opacity lr"),
    "lr.scale": Key(float, _LR.scale, "log-scale lr"),
    "lr.rotation": Key(float, _LR.rotation, "quaternion lr"),
    "adam.beta1": Key(float, _TC.beta1, "Adam beta1"),
    "adam.beta2": Key(float, _TC.beta2, "Adam beta2"),
    "adam.eps": Key(float, _TC.eps, "Adam epsilon"),
    "schedule.s": Key(float, _TC.steepness, "schedule steepness s"),
    "schedule.m": Key(float, _TC.decay_node, "schedule decay node m"),
    "edge.radius": Key(int, _TC.edge_radius, "edge-enhancement box radius r"),
    "loss.dssim": Key(float, _TC.dssim_weight, "weight of an added (1 - SSIM) term; 0 disables"),
    "densify.mode": Key(_choice("auto", "baseline", "opacity_weighted"), "auto", "criterion; auto follows mode"),
    "densify.t_reading": Key(_choice("blend_weight", "pixel_transmittance"), _DC.t_reading, "per-view weight t"),
    "densify.tau_pos": Key(float, _DC.tau_pos, "NDC-gradient threshold"),
    "densify.scale_split_fraction": Key(float, _DC.scale_split_fraction, "split above this fraction of scene radius"),
    "densify.interval": Key(int, _DC.interval, "iterations between densify events"),
    "densify.start_iter": Key(int, _DC.start_iter, "first densify iteration (exclusive)"),
    "densify.stop_iter": Key(_opt_int, None, "last densify iteration (exclusive); default N/2"),
    "densify.opacity_reset_interval": Key(int, _DC.opacity_reset_interval, "iterations between opacity resets"),
    "densify.prune_opacity_threshold": Key(float, _DC.prune_opacity_threshold, "prune below this opacity"),
    "densify.prune_scale_fraction": Key(float, _DC.prune_scale_fraction, "prune above this fraction of scene radius"),
    "init.count": Key(int, _INIT.count, "initial Gaussian count"),
    "init.variance_scale": Key(float, _INIT.variance_scale, "initial sigma relative to box diagonal / count^(1/3)"),
    "init.initial_opacity": Key(float, _INIT.initial_opacity, "initial opacity"),
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v.default for k, v in KEYS.items()})

    def update(self, overrides: dict[str, Any], source: str = "override") -> None:
        for key, raw in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"{source}: unknown key {key!r}")
            try:
                self.values[key] = KEYS[key].parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {key}: {exc}") from None

    @classmethod
    def load(cls, path: Path | None = None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
            cfg.update(_flatten(data), source=str(path))
        if overrides:
            cfg.update(overrides, source="flag")
        cfg.to_train_config()  # validate eagerly
        return cfg

    def with_mode(self, mode: str) -> "RunConfig":
        out = RunConfig(dict(self.values))
        out.update({"mode": mode})
        return out

    def to_json(self) -> str:
        vals = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()}
        return json.dumps(vals, indent=2, sort_keys=True) + "\n"

    def to_train_config(self) -> TrainConfig:
        v = self.values
        geometric, appearance, crit = MODES[v["mode"]]
        if v["densify.mode"] != "auto":
            crit = v["densify.mode"]
        n = v["train.iterations"]
        if n < 1:
            raise ConfigError("train.iterations must be >= 1")
        stop = v["densify.stop_iter"] if v["densify.stop_iter"] is not None else max(n // 2, v["densify.start_iter"] + 1)
        try:
            tc = TrainConfig(
                iterations=n,
                lr=LearningRates(
                    v["lr.position_init"], v["lr.position_final"], v["lr.sh_dc"], v["lr.sh_rest"],
                    v["lr.opacity"], v["lr.scale"], v["lr.rotation"],
                ),
                beta1=v["adam.beta1"],
                beta2=v["adam.beta2"],
                eps=v["adam.eps"],
                steepness=v["schedule.s"],
                decay_node=v["schedule.m"],
                use_geometric=geometric,
                use_appearance=appearance,
                edge_radius=v["edge.radius"],
                dssim_weight=v["loss.dssim"],
                densify=DensifyConfig(
                    tau_pos=v["densify.tau_pos"],
                    scale_split_fraction=v["densify.scale_split_fraction"],
                    interval=v["densify.interval"],
                    start_iter=v["densify.start_iter"],
                    stop_iter=stop,
                    opacity_reset_interval=v["densify.opacity_reset_interval"],
                    prune_opacity_threshold=v["densify.prune_opacity_threshold"],
                    prune_scale_fraction=v["densify.prune_scale_fraction"],
                    mode=crit,
                    t_reading=v["densify.t_reading"],
                ),
                init=SLVInit(v["init.count"], v["init.variance_scale"], v["init.initial_opacity"]),
                seed=v["train.seed"],
                background=v["train.background"],
                max_sh_degree=v["train.max_sh_degree"],
                sh_interval=v["train.sh_interval"],
                eval_interval=v["train.eval_interval"],
                checkpoint_iters=v["train.checkpoint_iters"],
            )
            tc.loss_config()  # schedule parameters are checked here
            return tc
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _flatten(data: dict, prefix: str = "") -> dict[str, Any]:
    """Accept both ``{"densify": {"mode": ...}}`` and ``{"densify.mode": ...}``."""
    out: dict[str, Any] = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve_run_dir(path: str | Path) -> Path:
    """Relative run directories live under $SPLATFIT_RUN_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p
