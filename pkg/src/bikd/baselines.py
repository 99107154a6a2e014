"""Reference trainers (CE, fixed-alpha KD) and weight-scatter export."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bilevel import FitResult, batch_slices, loss_pair, teacher_logits_for
from .config import TrainConfig, stream_rng
from .data import LabeledDataset
from .losses import KdConfig, fixed_alpha_kd_loss, hard_loss, one_hot
from .metrics import epoch_row, write_rows
from .networks import ModelState, Spec, clone_state, init_params
from .optim import SgdMomentum, step_lr

log = logging.getLogger(__name__)

SCATTER_FIELDS = ("ce_teacher", "ce_student", "w_hard", "w_soft", "class_index")


def _supervised_fit(
    cfg: TrainConfig,
    model: ModelState,
    train: LabeledDataset,
    val: LabeledDataset,
    batch_loss: Callable[[ModelState, np.ndarray], Tensor],
) -> FitResult:
    opt = SgdMomentum(cfg.eta_theta, cfg.momentum, cfg.weight_decay)
    shuffle = stream_rng(cfg.seed, "shuffle")
    runlog = [epoch_row(0, float("nan"), model, val, None, 0)]
    for epoch in range(cfg.epochs):
        lr = step_lr(cfg.eta_theta, epoch, cfg.milestones, cfg.lr_gamma)
        losses = []
        for idx in batch_slices(shuffle, len(train), cfg.batch_size):
            loss = batch_loss(model, idx)
            grads = ad.grad(loss, model.tensors())
            opt.step(model, dict(zip(model.names, grads)), lr)
            losses.append(loss.item())
        row = epoch_row(epoch + 1, float(np.mean(losses)), model, val, None, 0)
        runlog.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch + 1, row["train_loss"], row["val_loss"])
    return FitResult(model, None, runlog)


def train_ce(cfg: TrainConfig, model: ModelState, train: LabeledDataset, val: LabeledDataset) -> FitResult:
    """Plain cross-entropy training; ``model`` is updated in place."""
    dtype = cfg.np_dtype
    if model.dtype != dtype:
        model = model.astype(dtype)
    X = train.features.astype(dtype)
    Y = one_hot(train.labels, train.num_classes, dtype)

    def batch_loss(m, idx):
        return ad.mean(hard_loss(m.forward(X[idx]), Y[idx]))

    return _supervised_fit(cfg, model, train, val, batch_loss)


def train_teacher(cfg: TrainConfig, spec: Spec, train: LabeledDataset, val: LabeledDataset) -> FitResult:
    """CE-pretrain a teacher on the (imbalanced) transfer set."""
    seed = int(stream_rng(cfg.seed, "teacher_init").integers(2**31))
    return train_ce(cfg, init_params(spec, seed, dtype=cfg.np_dtype), train, val)


def train_vanilla_kd(
    cfg: TrainConfig, teacher: ModelState, student: ModelState, train: LabeledDataset, val: LabeledDataset
) -> FitResult:
    """Fixed-alpha distillation: mean((1 - alpha) * hard + alpha * soft)."""
    dtype = cfg.np_dtype
    if student.dtype != dtype:
        student = student.astype(dtype)
    X = train.features.astype(dtype)
    Y = one_hot(train.labels, train.num_classes, dtype)
    T = teacher_logits_for(teacher, train.features, dtype)
    kd = KdConfig(cfg.tau, cfg.alpha)

    def batch_loss(m, idx):
        return fixed_alpha_kd_loss(T[idx], m.forward(X[idx]), Y[idx], kd)

    return _supervised_fit(cfg, student, train, val, batch_loss)


def weight_scatter(meta: ModelState, teacher: ModelState, student: ModelState, train: LabeledDataset) -> list[dict]:
    """One record per training sample: its loss pair, the meta weights and its class."""
    dtype = meta.dtype
    Y = one_hot(train.labels, train.num_classes, dtype)
    T = teacher_logits_for(teacher, train.features, dtype)
    S = teacher_logits_for(student, train.features, dtype)
    pair = loss_pair(T, S, Y)
    with ad.no_grad():
        w = meta.forward(Tensor(pair, dtype=dtype)).data
    return [
        {
            "ce_teacher": float(pair[i, 0]),
            "ce_student": float(pair[i, 1]),
            "w_hard": float(w[i, 0]),
            "w_soft": float(w[i, 1]),
            "class_index": int(train.labels[i]),
        }
        for i in range(len(train))
    ]


def export_weight_scatter(
    meta: ModelState, teacher: ModelState, student: ModelState, train: LabeledDataset, path: str | Path | None = None
) -> list[dict]:
    records = weight_scatter(meta, teacher, student, train)
    if path is not None:
        write_rows(path, records)
    return records


def alpha_sweep(
    cfg: TrainConfig,
    teacher: ModelState,
    student_spec: Spec,
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
    alphas=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
) -> list[dict]:
    """Fixed-alpha KD at each alpha from the same student initialization."""
    import dataclasses

    from .config import stream_seed
    from .metrics import evaluate

    rows = []
    init = init_params(student_spec, stream_seed(cfg.seed, "init"), dtype=cfg.np_dtype)
    for a in alphas:
        c = dataclasses.replace(cfg, alpha=float(a))
        student = train_vanilla_kd(c, teacher, clone_state(init), train, val).student
        rows.append({"alpha": float(a), **evaluate(student, test, train.counts()).to_row()})
    return rows
