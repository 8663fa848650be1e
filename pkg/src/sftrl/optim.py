"""Optimizers operating on ParameterSets in place."""
from __future__ import annotations

import math

import numpy as np

from .policy import ParameterSet, global_norm


def clip_grad_norm(grads: ParameterSet, max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; return the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParameterSet, grads: ParameterSet) -> None:
        for k, g in grads.items():
            params[k] -= params[k].dtype.type(self.lr) * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: ParameterSet = {}
        self.v: ParameterSet = {}

    def step(self, params: ParameterSet, grads: ParameterSet) -> None:
        b1, b2 = self.betas
        self.t += 1
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(params[k].dtype)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
