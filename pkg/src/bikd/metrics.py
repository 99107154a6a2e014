"""Evaluation metrics and CSV writers."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset
from .losses import one_hot, val_loss
from .networks import ModelState


def predict_logits(model: ModelState, features: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, features.shape[0], chunk):
            out.append(model.forward(features[i : i + chunk].astype(model.dtype)).data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.out_dim))


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def head_tail_split(train_counts: Sequence[int]) -> tuple[list[int], list[int]]:
    """Head = classes whose training count is >= the median count."""
    counts = np.asarray(train_counts)
    med = float(np.median(counts))
    head = [int(c) for c in np.flatnonzero(counts >= med)]
    tail = [int(c) for c in np.flatnonzero(counts < med)]
    return head, tail


@dataclass
class Metrics:
    accuracy: float
    per_class: list[float]
    confusion: np.ndarray
    head_accuracy: float | None = None
    tail_accuracy: float | None = None
    head_classes: list[int] | None = None
    tail_classes: list[int] | None = None

    def to_row(self) -> dict:
        row = {"accuracy": self.accuracy}
        if self.head_accuracy is not None:
            row["head_accuracy"] = self.head_accuracy
            row["tail_accuracy"] = self.tail_accuracy
        for c, a in enumerate(self.per_class):
            row[f"acc_class_{c}"] = a
        return row


def _split_accuracy(cm: np.ndarray, classes: list[int]) -> float:
    if not classes:
        return float("nan")
    return float(np.trace(cm[np.ix_(classes, classes)]) / cm[classes].sum())


def evaluate(model: ModelState, test: LabeledDataset, train_counts: Sequence[int] | None = None) -> Metrics:
    """Argmax predictions (ties go to the lowest class index) scored exactly."""
    preds = np.argmax(predict_logits(model, test.features), axis=1)
    cm = confusion_matrix(test.labels, preds, test.num_classes)
    rows = cm.sum(axis=1)
    per_class = [float(cm[c, c] / rows[c]) if rows[c] else float("nan") for c in range(test.num_classes)]
    m = Metrics(float(np.trace(cm) / cm.sum()), per_class, cm)
    if train_counts is not None:
        head, tail = head_tail_split(train_counts)
        # split accuracies count only correct predictions, so they recompose to the overall accuracy
        m.head_classes, m.tail_classes = head, tail
        m.head_accuracy = float(sum(cm[c, c] for c in head) / rows[head].sum())
        m.tail_accuracy = float(sum(cm[c, c] for c in tail) / rows[tail].sum()) if tail else float("nan")
    return m


def epoch_row(epoch: int, train_loss: float, model: ModelState, val: LabeledDataset, weights, meta_updates: int) -> dict:
    logits = predict_logits(model, val.features)
    with ad.no_grad():
        vl = val_loss(ad.Tensor(logits), one_hot(val.labels, val.num_classes, logits.dtype)).item()
    preds = np.argmax(logits, axis=1)
    row = {"epoch": epoch, "train_loss": train_loss, "val_loss": vl}
    for c in range(val.num_classes):
        mask = val.labels == c
        row[f"acc_class_{c}"] = float((preds[mask] == c).mean()) if mask.any() else float("nan")
    row["mean_w_hard"] = float("nan") if weights is None else weights[0]
    row["mean_w_soft"] = float("nan") if weights is None else weights[1]
    row["meta_updates"] = meta_updates
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(r[k]) for k in rows[0]])
    return path


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_confusion(path: str | Path, cm: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in range(cm.shape[1])])
        for c, row in enumerate(cm):
            w.writerow([str(c)] + [str(int(v)) for v in row])
    return path
