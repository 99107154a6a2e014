"""Hard / soft distillation losses, all per-sample unless noted."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class KdConfig:
    tau: float = 4.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_one_hot(labels: np.ndarray, logits: Tensor) -> np.ndarray:
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    ok = np.all((labels == 0) | (labels == 1), axis=1) & (labels.sum(axis=1) == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"label row {bad} is not one-hot")
    return labels.astype(logits.dtype, copy=False)


def hard_loss(logits_s: Tensor, labels) -> Tensor:
    """CE(y, softmax(logits)) for each row."""
    y = _check_one_hot(labels, logits_s)
    return ad.neg(ad.row_sum(ad.mul(Tensor(y), ad.log_softmax(logits_s, 1.0))))


def soft_loss(logits_t: Tensor | np.ndarray, logits_s: Tensor, tau: float) -> Tensor:
    """tau^2 * KL(p_T^tau || p_S^tau) per row; the teacher side is a constant."""
    t = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t, dtype=logits_s.dtype)
    if t.shape != logits_s.shape:
        raise ShapeError(f"teacher logits {t.shape} vs student logits {logits_s.shape}")
    with ad.no_grad():
        logp_t = ad.log_softmax(Tensor(t, dtype=logits_s.dtype), tau).data
    p_t = np.exp(logp_t)
    logp_s = ad.log_softmax(logits_s, tau)
    kl = ad.row_sum(ad.mul(Tensor(p_t), ad.sub(Tensor(logp_t), logp_s)))
    return ad.scale(kl, tau * tau)


def soft_ce_loss(logits_t: Tensor | np.ndarray, logits_s: Tensor, tau: float) -> Tensor:
    """tau^2 * CE(p_T^tau, p_S^tau); differs from :func:`soft_loss` by a student-independent constant."""
    t = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t, dtype=logits_s.dtype)
    with ad.no_grad():
        p_t = np.exp(ad.log_softmax(Tensor(t, dtype=logits_s.dtype), tau).data)
    ce = ad.neg(ad.row_sum(ad.mul(Tensor(p_t), ad.log_softmax(logits_s, tau))))
    return ad.scale(ce, tau * tau)


def weighted_train_loss(w_hard: Tensor, w_soft: Tensor, l_hard: Tensor, l_soft: Tensor) -> Tensor:
    """mean_i( w_hard_i * l_hard_i + w_soft_i * l_soft_i ); weights need not sum to one."""
    shapes = {w_hard.shape, w_soft.shape, l_hard.shape, l_soft.shape}
    if len(shapes) != 1:
        raise ShapeError(f"weighted_train_loss: length mismatch {sorted(shapes)}")
    return ad.mean(ad.add(ad.mul(w_hard, l_hard), ad.mul(w_soft, l_soft)))


def constant_weights(n: int, alpha: float, dtype=np.float64) -> tuple[Tensor, Tensor]:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return Tensor(np.full(n, 1.0 - alpha), dtype=dtype), Tensor(np.full(n, alpha), dtype=dtype)


def fixed_alpha_kd_loss(logits_t, logits_s: Tensor, labels, cfg: KdConfig) -> Tensor:
    w_h, w_s = constant_weights(logits_s.shape[0], cfg.alpha, logits_s.dtype)
    return weighted_train_loss(w_h, w_s, hard_loss(logits_s, labels), soft_loss(logits_t, logits_s, cfg.tau))


def val_loss(logits_s: Tensor, labels) -> Tensor:
    return ad.mean(hard_loss(logits_s, labels))
