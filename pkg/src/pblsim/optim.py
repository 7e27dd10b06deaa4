"""Adaptive-moment gradient descent over dictionaries of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    iterations: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # exponential decay so the last step uses lr * lr_final_factor
    lr_final_factor: float = 1.0
    # per-group learning rates override ``lr`` (keys are parameter names)
    group_lr: Dict[str, float] = field(default_factory=dict)
    seed: int = 0
    batch_rays: Optional[int] = None
    log_every: int = 0

    def lr_at(self, name: str, it: int) -> float:
        base = self.group_lr.get(name, self.lr)
        if self.iterations <= 1 or self.lr_final_factor == 1.0:
            return base
        return base * self.lr_final_factor ** (it / (self.iterations - 1))


class Adam:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        c = self.config
        it = self.t
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= c.beta1
            self.m[k] += (1.0 - c.beta1) * g
            self.v[k] *= c.beta2
            self.v[k] += (1.0 - c.beta2) * (g * g)
            denom = np.sqrt(self.v[k] / bc2) + c.eps
            params[k] = params[k] - c.lr_at(k, it) / bc1 * self.m[k] / denom
