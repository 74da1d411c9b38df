"""AdamW with cosine learning-rate decay and global-norm clipping."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from querystream.autodiff.tensor import Tensor


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None, total_steps: int | None = None,
                 warmup: int = 0, min_lr_ratio: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.total_steps = total_steps
        self.warmup = warmup
        self.min_lr_ratio = min_lr_ratio
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        step = self.t + 1
        if self.warmup and step <= self.warmup:
            return self.lr * step / self.warmup
        if not self.total_steps:
            return self.lr
        frac = min(1.0, (step - self.warmup) / max(1, self.total_steps - self.warmup))
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))

    def step(self, grads: dict[Tensor, np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        gs = [grads.get(p) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in gs if g is not None))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        lr = self.current_lr()
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, gs)):
            if g is None:
                continue
            g = g * scale
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data * (1 - lr * self.weight_decay) - lr * upd
        return norm
