"""AdamW with decoupled weight decay and a linear warm-up / linear decay schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Parameters


class AlignmentError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    total_steps: int = 0  # 0 disables the decay phase
    grad_clip: float = 0.0  # global-norm clip; 0 disables


def scheduled_lr(cfg: OptimConfig, step: int) -> float:
    """Learning rate for the ``step``-th update (1-based)."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.total_steps > cfg.warmup_steps:
        remaining = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
        return cfg.lr * max(remaining, 0.0)
    return cfg.lr


class AdamW:
    def __init__(self, params: Parameters, cfg: OptimConfig | None = None):
        self.params = params
        self.cfg = cfg or OptimConfig()
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.step_count = 0

    def current_lr(self) -> float:
        return scheduled_lr(self.cfg, self.step_count + 1)

    def step(self, grads: dict[str, np.ndarray] | None = None, lr: float | None = None) -> float:
        """Apply one update in place; returns the learning rate used."""
        if grads is None:
            grads = self.params.grads()
        if set(grads) != set(self.m):
            raise AlignmentError("gradient names do not match the parameter set")
        for n, t in self.params.items():
            if grads[n].shape != t.shape:
                raise AlignmentError(f"{n}: gradient shape {grads[n].shape} != {t.shape}")
        cfg = self.cfg
        self.step_count += 1
        lr = scheduled_lr(cfg, self.step_count) if lr is None else lr
        scale = 1.0
        if cfg.grad_clip > 0:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
        bc1 = 1.0 - cfg.beta1**self.step_count
        bc2 = 1.0 - cfg.beta2**self.step_count
        for n, t in self.params.items():
            g = grads[n] * scale if scale != 1.0 else grads[n]
            m, v = self.m[n], self.v[n]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay and t.ndim >= 2:
                update = update + cfg.weight_decay * t.data
            t.data = (t.data - lr * update).astype(t.dtype, copy=False)
        self.params.version += 1
        return lr

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for n in self.m:
            self.m[n] = np.array(state["m"][n], dtype=self.m[n].dtype)
            self.v[n] = np.array(state["v"][n], dtype=self.v[n].dtype)
