"""Adam / AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    weight_decay: float = 0.01
    max_lr: float = 5e-4
    warmup_fraction: float = 0.3
    initial_div: float = 25.0
    final_div: float = 1e4
    epochs: int = 1
    batch_size: int = 32
    noise_sigma: float = 0.1
    curriculum: bool = True
    seed: int = 2023
    grad_clip: float | None = None
    max_steps: int | None = None
    stride: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.optimizer = self.optimizer.lower()
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if self.max_lr < 0:
            raise ValueError("max_lr must be >= 0")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie strictly between 0 and 1")
        if self.initial_div <= 0 or self.final_div <= 0:
            raise ValueError("initial_div and final_div must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.stride < 1:
            raise ValueError("epochs must be >= 0; batch_size and stride >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        """AdamW at max lr 2e-4 for 8 epochs, no augmentation or curriculum."""
        base = dict(optimizer="adamw", max_lr=2e-4, epochs=8, noise_sigma=0.0, curriculum=False)
        base.update(overrides)
        return cls(**base)


def peak_step(total_steps: int, warmup_fraction: float) -> int:
    return int(round(warmup_fraction * (total_steps - 1)))


def _cos_interp(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * pct))


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step`` of a one-cycle schedule.

    Cosine ramp from ``max_lr / initial_div`` up to ``max_lr`` at
    :func:`peak_step`, then cosine decay to ``max_lr / final_div`` at the
    final step.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    top = cfg.max_lr
    if total_steps == 1:
        return top
    peak = peak_step(total_steps, cfg.warmup_fraction)
    if step <= peak:
        if peak == 0:
            return top
        return _cos_interp(top / cfg.initial_div, top, step / peak)
    return _cos_interp(top, top / cfg.final_div, (step - peak) / (total_steps - 1 - peak))


class Adam:
    """Adam, or AdamW when ``decoupled_weight_decay`` is set."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled_weight_decay: bool = False):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled_weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        if cfg.optimizer == "adamw":
            return cls(params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay, True)
        return cls(params, (cfg.beta1, cfg.beta2), cfg.adam_eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.decoupled and self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.data.dtype, copy=False)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
