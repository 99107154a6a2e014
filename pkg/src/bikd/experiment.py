"""Dataset preparation, run directories and the comparative harness."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .baselines import export_weight_scatter, train_ce, train_teacher, train_vanilla_kd
from .bilevel import fit
from .config import DataConfig, ExperimentConfig, TrainConfig, stream_seed
from .data import (
    GaussianMixSpec,
    LabeledDataset,
    LongTailSpec,
    carve_validation,
    class_counts,
    gen_gaussian_mix,
    load_cifar10_binary,
    load_dataset,
    make_longtail,
    save_dataset,
)
from .metrics import evaluate, write_confusion, write_rows
from .networks import MetaNetSpec, MlpSpec, TinyCnnSpec, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "BIKD_OUTPUT_ROOT"


class RunError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


@dataclass
class Splits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    counts: list[int]


def build_splits(cfg: DataConfig) -> Splits:
    """Carve a balanced validation set from the balanced pool, then long-tail the rest."""
    lt = LongTailSpec(cfg.classes, cfg.n_max, cfg.rho, stream_seed(cfg.seed, "data"))
    counts = class_counts(lt)
    if cfg.source == "synthetic":
        per_class = cfg.n_max + cfg.val_total // cfg.classes
        pool = gen_gaussian_mix(
            GaussianMixSpec(cfg.classes, cfg.dim, per_class, cfg.cov_scale, cfg.separation, seed=cfg.seed)
        )
        test = gen_gaussian_mix(
            GaussianMixSpec(cfg.classes, cfg.dim, cfg.test_per_class, cfg.cov_scale, cfg.separation,
                            seed=cfg.seed, noise_seed=stream_seed(cfg.seed, "test"))
        )
    elif cfg.source == "cifar10":
        if not cfg.cifar_dir:
            raise RunError("USAGE", "cifar10 source needs cifar_dir")
        root = Path(cfg.cifar_dir)
        pool = load_cifar10_binary(sorted(root.glob("data_batch_*.bin")))
        test = load_cifar10_binary(root / "test_batch.bin")
    else:
        raise RunError("USAGE", f"unknown data source {cfg.source!r}")
    val, rest = carve_validation(pool, cfg.val_total, seed=stream_seed(cfg.seed, "val"))
    train = make_longtail(rest, lt)
    return Splits(train, val, test, counts)


def write_data_dir(cfg: DataConfig, out: str | Path) -> dict:
    out = resolve_out(out)
    splits = build_splits(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        ds = getattr(splits, name)
        save_dataset(ds, out / name, {"split": name})
    manifest = {
        "data_config": cfg.to_dict(),
        "class_counts": splits.counts,
        "realized_counts": {n: getattr(splits, n).counts() for n in ("train", "val", "test")},
        "digests": {n: getattr(splits, n).digest() for n in ("train", "val", "test")},
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_data_dir(path: str | Path) -> tuple[Splits, dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise RunError("MISSING_ARTIFACT", f"dataset manifest not found: {mf}")
    manifest = json.loads(mf.read_text())
    sets = {}
    for n in ("train", "val", "test"):
        try:
            sets[n] = load_dataset(path / n)
        except FileNotFoundError as exc:
            raise RunError("MISSING_ARTIFACT", f"dataset split missing: {exc}") from exc
    return Splits(sets["train"], sets["val"], sets["test"], manifest["class_counts"]), manifest


def backbone_spec(exp: ExperimentConfig, role: str, in_dim: int, classes: int, seed: int):
    widths = exp.teacher_widths if role == "teacher" else exp.student_widths
    if exp.backbone == "cnn":
        chans = (16, 32) if role == "teacher" else (8, 16)
        return TinyCnnSpec(channels=chans, classes=classes, seed=seed)
    widths = (in_dim, *widths[1:-1], classes)
    return MlpSpec(widths, "relu", seed=seed)


def train_run(
    exp: ExperimentConfig,
    data_dir: str | Path,
    out: str | Path,
    teacher_dir: str | Path | None = None,
    role: str = "student",
) -> Path:
    """Train one method and write a self-describing run directory."""
    out = resolve_out(out)
    splits, data_manifest = load_data_dir(data_dir)
    cfg = exp.train
    C = splits.train.num_classes
    teacher = None
    if exp.method in ("kd", "bikd"):
        if teacher_dir is None:
            raise RunError("MISSING_TEACHER", f"method {exp.method} needs --teacher (a run directory with model.json)")
        stem = Path(teacher_dir) / "model"
        if not stem.with_suffix(".json").exists():
            raise RunError("MISSING_TEACHER", f"teacher checkpoint not found: {stem.with_suffix('.json')}")
        teacher = load_checkpoint(stem)
    init_seed = stream_seed(cfg.seed, "teacher_init" if role == "teacher" else "init")
    spec = backbone_spec(exp, role, splits.train.dim, C, init_seed)
    if exp.method == "ce":
        model = init_params(spec, init_seed, dtype=cfg.np_dtype)
        result = train_ce(cfg, model, splits.train, splits.val)
    elif exp.method == "kd":
        result = train_vanilla_kd(cfg, teacher, init_params(spec, init_seed, dtype=cfg.np_dtype), splits.train, splits.val)
    else:
        meta = init_params(MetaNetSpec(cfg.meta_hidden, clip_inputs=cfg.clip_meta_inputs),
                           stream_seed(cfg.seed, "meta_init"), dtype=cfg.np_dtype)
        result = fit(cfg, splits.train, splits.val, teacher, init_params(spec, init_seed, dtype=cfg.np_dtype), meta)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.student, out / "model")
    if result.meta is not None:
        save_checkpoint(result.meta, out / "meta")
    write_rows(out / "runlog.csv", result.runlog)
    manifest = {
        "config": exp.to_dict(),
        "role": role,
        "seed": cfg.seed,
        "data_dir": str(Path(data_dir).resolve()),
        "dataset_digests": data_manifest["digests"],
        "teacher_dir": None if teacher_dir is None else str(Path(teacher_dir).resolve()),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def _load_run(run_dir: str | Path) -> tuple[Path, dict]:
    run_dir = Path(run_dir)
    mf = run_dir / "manifest.json"
    if not mf.exists():
        raise RunError("MISSING_ARTIFACT", f"run manifest not found: {mf}")
    if not (run_dir / "model.json").exists():
        raise RunError("MISSING_ARTIFACT", f"model checkpoint not found: {run_dir / 'model.json'}")
    return run_dir, json.loads(mf.read_text())


def eval_run(run_dir: str | Path) -> dict:
    run_dir, manifest = _load_run(run_dir)
    splits, _ = load_data_dir(manifest["data_dir"])
    model = load_checkpoint(run_dir / "model")
    m = evaluate(model, splits.test, splits.train.counts())
    row = {"run": run_dir.name, "method": manifest["config"]["method"], "seed": manifest["seed"], **m.to_row()}
    tail3 = np.argsort(np.asarray(splits.train.counts()), kind="stable")[:3]
    row["tail3_accuracy"] = float(np.mean([m.per_class[c] for c in tail3]))
    write_rows(run_dir / "metrics.csv", [row])
    write_confusion(run_dir / "confusion.csv", m.confusion)
    return row


def export_run(run_dir: str | Path) -> Path:
    run_dir, manifest = _load_run(run_dir)
    if not (run_dir / "meta.json").exists():
        raise RunError("MISSING_ARTIFACT", f"meta network checkpoint not found: {run_dir / 'meta.json'}")
    if not manifest.get("teacher_dir"):
        raise RunError("MISSING_ARTIFACT", "run manifest names no teacher")
    splits, _ = load_data_dir(manifest["data_dir"])
    teacher = load_checkpoint(Path(manifest["teacher_dir"]) / "model")
    path = run_dir / "weight_scatter.csv"
    export_weight_scatter(load_checkpoint(run_dir / "meta"), teacher, load_checkpoint(run_dir / "model"), splits.train, path)
    return path


def comparison_table(rows: Sequence[dict]) -> list[dict]:
    """Mean accuracy / tail accuracy per method over seeds."""
    out = []
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        out.append(
            {
                "method": method,
                "runs": len(sel),
                "accuracy": float(np.mean([r["accuracy"] for r in sel])),
                "tail3_accuracy": float(np.mean([r["tail3_accuracy"] for r in sel])),
            }
        )
    return out


@dataclass
class DeskComparison:
    per_seed: list[dict]
    bikd_tail: float
    kd_tail: float


def desk_comparison(
    data_cfg: DataConfig, train_cfg: TrainConfig, seeds: Sequence[int], teacher_widths, student_widths
) -> DeskComparison:
    """Teacher (CE), vanilla KD and BiKD on one long-tailed synthetic split per seed."""
    rows = []
    for seed in seeds:
        dc = DataConfig(**{**data_cfg.to_dict(), "seed": seed})
        splits = build_splits(dc)
        C, d = dc.classes, splits.train.dim
        tc = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
        teacher = train_teacher(tc, MlpSpec((d, *teacher_widths[1:-1], C)), splits.train, splits.val).student
        s_spec = MlpSpec((d, *student_widths[1:-1], C))
        s_seed = stream_seed(seed, "init")
        kd = train_vanilla_kd(tc, teacher, init_params(s_spec, s_seed, dtype=tc.np_dtype), splits.train, splits.val).student
        meta = init_params(MetaNetSpec(tc.meta_hidden), stream_seed(seed, "meta_init"), dtype=tc.np_dtype)
        bk = fit(tc, splits.train, splits.val, teacher, init_params(s_spec, s_seed, dtype=tc.np_dtype), meta).student
        tail3 = np.argsort(np.asarray(splits.counts), kind="stable")[:3]
        row = {"seed": seed}
        for name, model in (("teacher", teacher), ("kd", kd), ("bikd", bk)):
            m = evaluate(model, splits.test, splits.counts)
            row[f"{name}_acc"] = m.accuracy
            row[f"{name}_tail3"] = float(np.mean([m.per_class[c] for c in tail3]))
        log.info("seed %d: %s", seed, row)
        rows.append(row)
    return DeskComparison(rows, float(np.mean([r["bikd_tail3"] for r in rows])), float(np.mean([r["kd_tail3"] for r in rows])))
