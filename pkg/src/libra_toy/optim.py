"""AdamW with global-norm clipping and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    total_steps: int = 2000
    warmup_steps: int = 100
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")


def cosine_lr(step: int, cfg: OptimizerConfig) -> float:
    """Learning rate for 1-based ``step``: linear ramp to the peak at ``warmup_steps``, cosine to 0 at ``total_steps``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, cfg.total_steps - cfg.warmup_steps)
    frac = min(max(frac, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class AdamW:
    """Decoupled-weight-decay Adam over a dict of numpy arrays, updated in place.

    ``grad_masks`` optionally zeroes parts of a gradient (e.g. a frozen
    embedding row) before the moment update, so masked entries never move.
    """

    def __init__(self, params: dict[str, np.ndarray], names, cfg: OptimizerConfig, grad_masks=None):
        self.params = params
        self.names = sorted(names)
        self.cfg = cfg
        self.grad_masks = grad_masks or {}
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> dict:
        cfg = self.cfg
        self.t += 1
        grads = {k: grads[k] * self.grad_masks[k] if k in self.grad_masks else grads[k] for k in self.names}
        norm = global_norm(grads)
        clip = 1.0
        if cfg.clip_norm and norm > cfg.clip_norm:
            clip = cfg.clip_norm / (norm + 1e-12)
        lr = cosine_lr(self.t, cfg)
        b1, b2 = cfg.betas
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for k in self.names:
            g = grads[k] * clip
            p = self.params[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + cfg.eps)
            if cfg.weight_decay and p.ndim > 1:
                upd = upd + cfg.weight_decay * p
            if k in self.grad_masks:
                upd = upd * self.grad_masks[k]
            p -= lr * upd
        return {"lr": lr, "grad_norm": norm}
