"""Adam over the cloud's parameter groups."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from splatfit.scene import GaussianCloud

log = logging.getLogger(__name__)


def exp_decay(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if max_steps <= 0:
        return lr_final
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp((1 - t) * math.log(lr_init) + t * math.log(lr_final))


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def _ensure(self, params: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, object]) -> int:
        """Update ``params`` in place. Returns the number of rows skipped for
        non-finite gradients.

        ``lrs[name]`` is a scalar or an array broadcastable to the parameter.
        """
        self._ensure(params)
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        n = next(iter(params.values())).shape[0]
        finite = np.ones(n, dtype=bool)
        for g in grads.values():
            finite &= np.isfinite(g.reshape(n, -1)).all(axis=1)
        skipped = int(n - finite.sum())
        if skipped:
            log.warning("skipping update of %d Gaussian(s) with non-finite gradients", skipped)
        if not skipped:
            for name, p in params.items():
                g, m, v = grads[name], self.m[name], self.v[name]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                p -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            return 0
        for name, p in params.items():
            g = np.where(finite.reshape((n,) + (1,) * (p.ndim - 1)), grads[name], 0.0)
            m, v = self.m[name], self.v[name]
            upd = finite.reshape((n,) + (1,) * (p.ndim - 1))
            m_new = self.beta1 * m + (1 - self.beta1) * g
            v_new = self.beta2 * v + (1 - self.beta2) * g * g
            np.copyto(m, m_new, where=upd)
            np.copyto(v, v_new, where=upd)
            delta = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            np.subtract(p, delta, out=p, where=np.broadcast_to(upd, p.shape))
        return skipped

    def direction(self, name: str) -> np.ndarray:
        """Bias-corrected step direction m_hat / (sqrt(v_hat) + eps) of a group."""
        t = max(self.step_count, 1)
        m = self.m[name] / (1.0 - self.beta1**t)
        v = self.v[name] / (1.0 - self.beta2**t)
        return m / (np.sqrt(v) + self.eps)

    def remap(self, origin: np.ndarray) -> None:
        """Carry moments across a densify/prune event; new rows start at zero."""
        src = np.asarray(origin)
        new = src < 0
        for store in (self.m, self.v):
            for name, arr in store.items():
                out = arr[np.where(new, 0, src)].copy()
                out[new] = 0.0
                store[name] = out

    def zero_rows(self, name: str) -> None:
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0

    def state(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array(self.step_count)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


def renormalize_quats(cloud: GaussianCloud) -> None:
    norms = np.linalg.norm(cloud.quats, axis=1, keepdims=True)
    cloud.quats /= np.where(norms > 0, norms, 1.0)
