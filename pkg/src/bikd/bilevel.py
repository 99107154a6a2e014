"""Bilevel distillation engine.

Per training batch the engine clones the student, weights every sample's
hard/soft loss with the meta network, takes one virtual SGD step that is a
differentiable function of the meta parameters, scores the virtual student on
a validation batch, and accumulates the resulting hypergradient.  Every ``k``
batches the meta network takes an optimizer step on the summed
hypergradient; the real student then steps with weights from the updated meta
network.

The student trajectory is detached from phi: the per-sample loss gradients
are constants, so the virtual parameters are linear in the weights and the
hypergradient only needs first-order sweeps (one reverse, one forward).

Three independent routes to the window hypergradient are provided:

* :func:`one_step_hypergrad` - reverse-mode through the virtual step,
* :func:`explicit_hypergrad` - assembled from per-sample gradient alignments,
* :func:`fd_hypergrad` - central finite differences of the window objective.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig, stream_rng, stream_seed
from .losses import hard_loss, soft_loss, val_loss, weighted_train_loss
from .networks import MetaNetSpec, ModelState, Spec, init_params
from .optim import SgdMomentum, make_meta_optimizer, step_lr

log = logging.getLogger(__name__)


class ContractError(RuntimeError):
    """A precondition of the bilevel machinery was violated."""


# ------------------------------------------------------------ flat helpers


def param_layout(spec: Spec) -> list[tuple[str, int, tuple[int, ...]]]:
    layout, offset = [], 0
    for name, shape in spec.param_shapes().items():
        layout.append((name, offset, shape))
        offset += int(np.prod(shape))
    return layout


def split_flat(vec: np.ndarray, spec: Spec) -> dict[str, np.ndarray]:
    return {name: vec[off : off + int(np.prod(shape))].reshape(shape) for name, off, shape in param_layout(spec)}


def unflatten(flat: Tensor, spec: Spec) -> dict[str, Tensor]:
    return {name: ad.slice_view(flat, off, shape) for name, off, shape in param_layout(spec)}


def flat_of(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads])


def model_from_flat(spec: Spec, vec: np.ndarray, requires_grad: bool = True) -> ModelState:
    params = {k: Tensor(v.copy(), requires_grad=requires_grad, dtype=vec.dtype) for k, v in split_flat(vec, spec).items()}
    return ModelState(spec, params)


# ------------------------------------------------------------ student graph


class StudentGraph:
    """Per-sample hard and soft losses recorded at a frozen student snapshot."""

    def __init__(self, spec: Spec, theta: np.ndarray, x: np.ndarray, y: np.ndarray, teacher_logits: np.ndarray, tau: float):
        self.spec = spec
        self.theta = theta
        dtype = theta.dtype
        self.leaves = [Tensor(v, requires_grad=True, dtype=dtype) for v in split_flat(theta, spec).values()]
        params = dict(zip(spec.param_shapes(), self.leaves))
        self.logits = spec.forward(params, Tensor(x, dtype=dtype))
        self.l_hard = hard_loss(self.logits, y)
        self.l_soft = soft_loss(teacher_logits, self.logits, tau)

    @property
    def batch_size(self) -> int:
        return self.l_hard.shape[0]

    def weighted_grad(self, w_hard: np.ndarray, w_soft: np.ndarray) -> tuple[float, np.ndarray]:
        """Value and flat theta-gradient of the weighted loss with constant weights."""
        dtype = self.theta.dtype
        loss = weighted_train_loss(Tensor(w_hard, dtype=dtype), Tensor(w_soft, dtype=dtype), self.l_hard, self.l_soft)
        return loss.item(), flat_of(ad.grad(loss, self.leaves))

    def weighted_grad_dict(self, w_hard: np.ndarray, w_soft: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        dtype = self.theta.dtype
        loss = weighted_train_loss(Tensor(w_hard, dtype=dtype), Tensor(w_soft, dtype=dtype), self.l_hard, self.l_soft)
        return loss.item(), dict(zip(self.spec.param_shapes(), ad.grad(loss, self.leaves)))

    def loss_jvp(self, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Directional derivatives of every per-sample loss along ``direction`` in theta-space."""
        tangents = {id(leaf): t for leaf, t in zip(self.leaves, split_flat(direction, self.spec).values())}
        jh, js = ad.jvp([self.l_hard, self.l_soft], tangents)
        return jh, js

    def per_sample_grads(self) -> tuple[np.ndarray, np.ndarray]:
        """[B, P] matrices of per-sample hard and soft gradients, one backward pass per row."""
        B = self.batch_size
        gh, gs = [], []
        for j in range(B):
            e = np.zeros(B, dtype=self.theta.dtype)
            e[j] = 1.0
            gh.append(flat_of(ad.grad(self.l_hard, self.leaves, grad_output=e)))
            gs.append(flat_of(ad.grad(self.l_soft, self.leaves, grad_output=e)))
        return np.stack(gh), np.stack(gs)


def loss_pair(teacher_logits: np.ndarray, student_logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """[B, 2] matrix of (CE(y, p_T), CE(y, p_S)) at temperature 1, detached."""
    dtype = student_logits.dtype
    with ad.no_grad():
        ce_t = hard_loss(Tensor(teacher_logits, dtype=dtype), y).data
        ce_s = hard_loss(Tensor(student_logits, dtype=dtype), y).data
    return np.stack([ce_t, ce_s], axis=1)


def compute_weights(meta: ModelState, pair: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-sample (w_hard, w_soft); live w.r.t. phi, the loss inputs are constants."""
    out = meta.forward(Tensor(np.asarray(pair), dtype=meta.dtype))
    return ad.column(out, 0), ad.column(out, 1)


# ------------------------------------------------------------ virtual step


def virtual_step(
    graph: StudentGraph,
    w_hard: Tensor,
    w_soft: Tensor,
    lr: float,
    momentum_buffer: np.ndarray | None = None,
    momentum: float = 0.0,
) -> Tensor:
    """theta'(phi) = theta - lr * grad_theta L_train(theta; w(phi)), as a flat tensor.

    The per-sample gradients are constants, so theta' is linear in the
    weights: its reverse rule is a forward-mode sweep of the per-sample losses
    along the incoming cotangent.
    """
    _, g = graph.weighted_grad(w_hard.data, w_soft.data)
    step = g if momentum_buffer is None else momentum * momentum_buffer + g
    data = graph.theta - lr * step
    coef = -lr / graph.batch_size

    def vjp(u):
        jh, js = graph.loss_jvp(u)
        return coef * jh, coef * js

    def jvp_(th, ts):
        B = graph.batch_size
        zero = np.zeros(B, dtype=data.dtype)
        _, d = graph.weighted_grad(zero if th is None else th, zero if ts is None else ts)
        return -lr * d

    return ad.custom_op(data, (w_hard, w_soft), vjp, jvp_)


def virtual_val_loss(theta_prime: Tensor, spec: Spec, val_x: np.ndarray, val_y: np.ndarray) -> Tensor:
    params = unflatten(theta_prime, spec)
    return val_loss(spec.forward(params, Tensor(val_x, dtype=theta_prime.dtype)), val_y)


def one_step_hypergrad(
    theta_prime: Tensor, spec: Spec, val_x: np.ndarray, val_y: np.ndarray, meta: ModelState
) -> tuple[np.ndarray, float]:
    """grad_phi L_val(theta'(phi)) for one inner step, plus the validation loss value."""
    if not ad.is_recording():
        raise ContractError("one_step_hypergrad needs a live tape (called under no_grad)")
    lv = virtual_val_loss(theta_prime, spec, val_x, val_y)
    return flat_of(ad.grad(lv, meta.tensors())), lv.item()


# ------------------------------------------------------------ records & accumulator


@dataclass
class InnerStepRecord:
    """Everything needed to replay one inner step with theta frozen."""

    theta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    teacher_logits: np.ndarray
    pair: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    lr: float
    phi: np.ndarray
    momentum_buffer: np.ndarray | None = None
    momentum: float = 0.0

    def graph(self, spec: Spec, tau: float) -> StudentGraph:
        return StudentGraph(spec, self.theta, self.x, self.y, self.teacher_logits, tau)


@dataclass
class HypergradAccumulator:
    total: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "HypergradAccumulator":
        return cls(np.zeros(n, dtype=dtype))

    def add(self, g: np.ndarray) -> None:
        self.total = self.total + g
        self.count += 1

    def reset(self) -> None:
        self.total = np.zeros_like(self.total)
        self.count = 0


@dataclass
class Window:
    records: list[InnerStepRecord]
    hypergrad: np.ndarray
    phi: np.ndarray


def _check_window(records: Sequence[InnerStepRecord]) -> np.ndarray:
    if not records:
        raise ContractError("empty window")
    phi = records[0].phi
    for r in records[1:]:
        if r.phi.shape != phi.shape or not np.array_equal(r.phi, phi):
            raise ContractError("records in one window must share the same meta parameters")
    return phi


def explicit_hypergrad(
    records: Sequence[InnerStepRecord], student_spec: Spec, meta_spec: MetaNetSpec, tau: float
) -> np.ndarray:
    """Closed-form window hypergradient from per-sample gradient alignments.

    -(lr/B) * sum_i sum_j [ <g_val_i, g_hard_ij> dw_hard_j/dphi + <g_val_i, g_soft_ij> dw_soft_j/dphi ]
    where g_val_i is the validation gradient at the i-th virtual student.
    """
    _check_window(records)
    total = None
    for rec in records:
        graph = rec.graph(student_spec, tau)
        B = graph.batch_size
        if rec.pair.shape[0] != B or rec.val_x.shape[0] != rec.val_y.shape[0]:
            raise ContractError("record batch sizes do not match")
        G_h, G_s = graph.per_sample_grads()
        meta = model_from_flat(meta_spec, rec.phi)
        w_h, w_s = compute_weights(meta, rec.pair)
        step = (G_h.T @ w_h.data + G_s.T @ w_s.data) / B
        if rec.momentum_buffer is not None:
            step = rec.momentum * rec.momentum_buffer + step
        theta_v = rec.theta - rec.lr * step
        g_val = val_gradient(student_spec, theta_v, rec.val_x, rec.val_y)
        align_h = G_h @ g_val
        align_s = G_s @ g_val
        contrib = np.zeros_like(rec.phi)
        phis = meta.tensors()
        for j in range(B):
            e = np.zeros(B, dtype=rec.phi.dtype)
            e[j] = 1.0
            dwh = flat_of(ad.grad(w_h, phis, grad_output=e))
            dws = flat_of(ad.grad(w_s, phis, grad_output=e))
            contrib = contrib + align_h[j] * dwh + align_s[j] * dws
        contrib = (-rec.lr / B) * contrib
        total = contrib if total is None else total + contrib
    return total


def val_gradient(spec: Spec, theta: np.ndarray, val_x: np.ndarray, val_y: np.ndarray) -> np.ndarray:
    model = model_from_flat(spec, theta)
    return flat_of(ad.grad(val_loss(model.forward(val_x), val_y), model.tensors()))


def window_objective(
    records: Sequence[InnerStepRecord], phi: np.ndarray, student_spec: Spec, meta_spec: MetaNetSpec, tau: float,
    graphs: Sequence[StudentGraph] | None = None,
) -> float:
    """J(phi) = sum_i L_val(theta_i - lr_i * grad L_train(theta_i; phi)) with every theta_i frozen."""
    graphs = graphs or [r.graph(student_spec, tau) for r in records]
    meta = model_from_flat(meta_spec, phi, requires_grad=False)
    total = 0.0
    for rec, graph in zip(records, graphs):
        with ad.no_grad():
            out = meta.forward(Tensor(rec.pair, dtype=phi.dtype)).data
        _, g = graph.weighted_grad(out[:, 0], out[:, 1])
        if rec.momentum_buffer is not None:
            g = rec.momentum * rec.momentum_buffer + g
        theta_v = rec.theta - rec.lr * g
        with ad.no_grad():
            total += val_loss(model_from_flat(student_spec, theta_v, False).forward(rec.val_x), rec.val_y).item()
    return total


def fd_hypergrad(
    records: Sequence[InnerStepRecord], student_spec: Spec, meta_spec: MetaNetSpec, tau: float, step: float = 1e-4
) -> np.ndarray:
    """Central finite differences of :func:`window_objective`, one meta coordinate at a time."""
    phi = _check_window(records)
    if phi.dtype != np.float64 or any(r.theta.dtype != np.float64 for r in records):
        raise ContractError("finite-difference hypergradient needs a float64 window")
    graphs = [r.graph(student_spec, tau) for r in records]
    out = np.zeros_like(phi)
    for i in range(phi.size):
        hi = phi.copy()
        lo = phi.copy()
        hi[i] += step
        lo[i] -= step
        jp = window_objective(records, hi, student_spec, meta_spec, tau, graphs)
        jm = window_objective(records, lo, student_spec, meta_spec, tau, graphs)
        out[i] = (jp - jm) / (2 * step)
    return out


# ------------------------------------------------------------ updates


def meta_update(acc: HypergradAccumulator, optimizer, meta: ModelState, lr: float | None = None) -> None:
    """One optimizer step on phi with the summed hypergradient, then reset."""
    if acc.count < 1:
        raise ContractError("meta_update called with an empty accumulator")
    optimizer.step(meta, split_flat(acc.total, meta.spec), lr)
    acc.reset()


def student_update(
    student: ModelState, optimizer: SgdMomentum, graph: StudentGraph, w_hard: np.ndarray, w_soft: np.ndarray, lr: float
) -> float:
    loss, grads = graph.weighted_grad_dict(w_hard, w_soft)
    optimizer.step(student, grads, lr)
    return loss


# ------------------------------------------------------------ trainer


@dataclass
class BatchReport:
    train_loss: float
    val_loss: float
    mean_w_hard: float
    mean_w_soft: float
    meta_updated: bool
    count: int


class BilevelTrainer:
    """Holds student, meta network, optimizers and the window state across batches."""

    def __init__(self, cfg: TrainConfig, student: ModelState, meta: ModelState, keep_records: bool = False):
        self.cfg = cfg
        self.student = student
        self.meta = meta
        self.student_opt = SgdMomentum(cfg.eta_theta, cfg.momentum, cfg.weight_decay)
        self.meta_opt = make_meta_optimizer(cfg.meta_optimizer, cfg.meta_lr())
        self.acc = HypergradAccumulator.zeros(meta.num_params(), meta.dtype)
        self.count = 0
        self.epoch = 0
        self.meta_updates = 0
        self.keep_records = keep_records
        self.window: list[InnerStepRecord] = []
        self.last_window: Window | None = None

    @property
    def lr(self) -> float:
        return step_lr(self.cfg.eta_theta, self.epoch, self.cfg.milestones, self.cfg.lr_gamma)

    def weights(self, pair: np.ndarray) -> tuple[Tensor, Tensor]:
        if self.cfg.pinned_weights is not None:
            wh, ws = self.cfg.pinned_weights
            n = pair.shape[0]
            return Tensor(np.full(n, wh), dtype=self.meta.dtype), Tensor(np.full(n, ws), dtype=self.meta.dtype)
        return compute_weights(self.meta, pair)

    def _momentum_buffer(self) -> np.ndarray | None:
        if not self.cfg.virtual_momentum:
            return None
        bufs = self.student.slots.get("momentum")
        if not bufs:
            return None
        return flat_of([bufs[n] for n in self.student.names])

    def meta_due(self) -> bool:
        if self.cfg.strict_window:
            return (self.count + 1) % self.cfg.k == 0
        return self.count % self.cfg.k == 0

    def run_batch(self, x, y, teacher_logits, val_x, val_y) -> BatchReport:
        cfg = self.cfg
        lr = self.lr
        spec = self.student.spec
        theta = self.student.flat()
        graph = StudentGraph(spec, theta, x, y, teacher_logits, cfg.tau)
        pair = loss_pair(teacher_logits, graph.logits.data, y)
        if cfg.clip_meta_inputs is not None:
            pair = np.minimum(pair, cfg.clip_meta_inputs)

        w_h, w_s = self.weights(pair)
        buf = self._momentum_buffer()
        theta_v = virtual_step(graph, w_h, w_s, lr, buf, cfg.momentum)
        hg, v_loss = one_step_hypergrad(theta_v, spec, val_x, val_y, self.meta)
        self.acc.add(hg)
        if self.keep_records:
            self.window.append(
                InnerStepRecord(theta, x, y, teacher_logits, pair, val_x, val_y, lr, self.meta.flat(), buf, cfg.momentum)
            )

        updated = False
        if self.meta_due():
            if self.keep_records:
                self.last_window = Window(self.window, self.acc.total.copy(), self.meta.flat())
                self.window = []
            meta_update(self.acc, self.meta_opt, self.meta)
            self.meta_updates += 1
            updated = True

        with ad.no_grad():
            w_h2, w_s2 = self.weights(pair)
        t_loss = student_update(self.student, self.student_opt, graph, w_h2.data, w_s2.data, lr)
        self.count += 1
        return BatchReport(t_loss, v_loss, float(w_h2.data.mean()), float(w_s2.data.mean()), updated, self.count)


# ------------------------------------------------------------ epoch loop


class ValSampler:
    """Cycles through the validation set in minibatches, reshuffling on each pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def batch_slices(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class FitResult:
    student: ModelState
    meta: ModelState | None
    runlog: list[dict] = field(default_factory=list)
    trainer: object | None = None


def teacher_logits_for(teacher: ModelState, features: np.ndarray, dtype, chunk: int = 1024) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, features.shape[0], chunk):
            out.append(teacher.forward(features[i : i + chunk].astype(teacher.dtype)).data)
    if not out:
        return np.zeros((0, teacher.spec.out_dim), dtype=dtype)
    return np.concatenate(out).astype(dtype)


def fit(
    cfg: TrainConfig,
    train,
    val,
    teacher: ModelState,
    student: ModelState,
    meta: ModelState | None = None,
    on_epoch=None,
) -> FitResult:
    """Run the bilevel loop for ``cfg.epochs`` epochs over ``train`` (a LabeledDataset)."""
    from .metrics import epoch_row
    from .losses import one_hot

    dtype = cfg.np_dtype
    if student.dtype != dtype:
        student = student.astype(dtype)
    if meta is None:
        meta = init_params(MetaNetSpec(hidden=cfg.meta_hidden), seed=stream_seed(cfg.seed, "meta_init"), dtype=dtype)
    elif meta.dtype != dtype:
        meta = meta.astype(dtype)
    C = train.num_classes
    X = train.features.astype(dtype)
    Y = one_hot(train.labels, C, dtype)
    T = teacher_logits_for(teacher, train.features, dtype)
    VX = val.features.astype(dtype)
    VY = one_hot(val.labels, C, dtype)

    trainer = BilevelTrainer(cfg, student, meta)
    shuffle = stream_rng(cfg.seed, "shuffle")
    sampler = ValSampler(len(val), cfg.val_batch_size, stream_rng(cfg.seed, "val"))
    runlog = [epoch_row(0, float("nan"), student, val, None, trainer.meta_updates)]
    for epoch in range(cfg.epochs):
        trainer.epoch = epoch
        losses, wh, ws = [], [], []
        for idx in batch_slices(shuffle, len(train), cfg.batch_size):
            vidx = sampler.next()
            rep = trainer.run_batch(X[idx], Y[idx], T[idx], VX[vidx], VY[vidx])
            losses.append(rep.train_loss)
            wh.append(rep.mean_w_hard)
            ws.append(rep.mean_w_soft)
        row = epoch_row(epoch + 1, float(np.mean(losses)), student, val, (float(np.mean(wh)), float(np.mean(ws))), trainer.meta_updates)
        runlog.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch + 1, row["train_loss"], row["val_loss"])
        if on_epoch:
            on_epoch(row)
    return FitResult(student, meta, runlog, trainer)
