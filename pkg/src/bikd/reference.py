"""Single-step online meta-reweighting loop, kept separate from the windowed trainer.

Used to check that the windowed engine with ``k = 1`` collapses to the
classic online scheme (meta step after every batch, no accumulator, no
counter).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .bilevel import StudentGraph, compute_weights, loss_pair, one_step_hypergrad, split_flat, virtual_step
from .config import TrainConfig
from .networks import ModelState
from .optim import SgdMomentum, make_meta_optimizer, step_lr


class OnlineReweighter:
    def __init__(self, cfg: TrainConfig, student: ModelState, meta: ModelState):
        self.cfg = cfg
        self.student = student
        self.meta = meta
        self.student_opt = SgdMomentum(cfg.eta_theta, cfg.momentum, cfg.weight_decay)
        self.meta_opt = make_meta_optimizer(cfg.meta_optimizer, cfg.eta_phi)
        self.epoch = 0

    def step(self, x, y, teacher_logits, val_x, val_y) -> np.ndarray:
        """One batch: meta step on this batch's hypergradient, then the student step. Returns the new phi."""
        lr = step_lr(self.cfg.eta_theta, self.epoch, self.cfg.milestones, self.cfg.lr_gamma)
        graph = StudentGraph(self.student.spec, self.student.flat(), x, y, teacher_logits, self.cfg.tau)
        pair = loss_pair(teacher_logits, graph.logits.data, y)
        w_h, w_s = compute_weights(self.meta, pair)
        theta_v = virtual_step(graph, w_h, w_s, lr)
        g, _ = one_step_hypergrad(theta_v, self.student.spec, val_x, val_y, self.meta)
        self.meta_opt.step(self.meta, split_flat(g, self.meta.spec))
        with ad.no_grad():
            w_h, w_s = compute_weights(self.meta, pair)
        _, grads = graph.weighted_grad_dict(w_h.data, w_s.data)
        self.student_opt.step(self.student, grads, lr)
        return self.meta.flat()
