"""SGD (with momentum / weight decay), Adam, and the step schedule.

Optimizer buffers live in ``ModelState.slots`` so they travel with checkpoints
and are dropped by a default ``clone_state``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .networks import ModelState


def step_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float = 0.1) -> float:
    """``base_lr * gamma^(number of milestones <= epoch)``."""
    lr = base_lr
    for m in milestones:
        if epoch >= m:
            lr *= gamma
    return lr


def _check(model: ModelState, grads: Mapping[str, np.ndarray]) -> None:
    for name, p in model.params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, parameter {p.shape}")


@dataclass
class SgdMomentum:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def step(self, model: ModelState, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        _check(model, grads)
        lr = self.lr if lr is None else lr
        bufs = model.slots.setdefault("momentum", {})
        for name, p in model.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = bufs.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                bufs[name] = buf
                g = buf
            p.data = p.data - lr * g


@dataclass
class PlainSgd:
    lr: float = 1e-3

    def step(self, model: ModelState, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        _check(model, grads)
        lr = self.lr if lr is None else lr
        for name, p in model.params.items():
            p.data = p.data - lr * grads[name]


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, model: ModelState, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        _check(model, grads)
        lr = self.lr if lr is None else lr
        m = model.slots.setdefault("adam_m", {})
        v = model.slots.setdefault("adam_v", {})
        counter = model.slots.setdefault("adam_step", {})
        t = int(counter.get("t", np.zeros(1, dtype=np.int64))[0]) + 1
        counter["t"] = np.array([t], dtype=np.int64)
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in model.params.items():
            g = grads[name]
            m[name] = self.beta1 * m.get(name, np.zeros_like(g)) + (1.0 - self.beta1) * g
            v[name] = self.beta2 * v.get(name, np.zeros_like(g)) + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + self.eps)


def make_meta_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return PlainSgd(lr=lr)
    raise ValueError(f"unknown meta optimizer {kind!r}")
