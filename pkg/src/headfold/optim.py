"""Adam with global-norm clipping and a warmup / inverse-sqrt schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    warmup: int = 0
    decay: str = "inverse-sqrt"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.decay not in ("inverse-sqrt", "constant"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` over ``warmup`` steps, then ``lr * sqrt(warmup / step)``."""
        step = max(step, 1)
        if self.decay == "constant":
            return self.lr * min(1.0, step / self.warmup) if self.warmup else self.lr
        if self.warmup:
            return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))
        return self.lr / math.sqrt(step)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm is None or not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState) -> dict:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    grads, norm = clip_grads(grads, state.clip_norm)
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return {"lr": lr, "grad_norm": norm}
