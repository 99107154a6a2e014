import csv

import numpy as np
import pytest

from bikd.baselines import SCATTER_FIELDS, alpha_sweep, export_weight_scatter, train_ce, train_teacher, train_vanilla_kd
from bikd.config import TrainConfig
from bikd.data import GaussianMixSpec, LabeledDataset, LongTailSpec, carve_validation, gen_gaussian_mix, make_longtail
from bikd.metrics import confusion_matrix, evaluate, head_tail_split, read_rows, write_rows
from bikd.networks import MetaNetSpec, MlpSpec, init_params, zero_params


def identity_model(C):
    m = zero_params(MlpSpec((C, C)))
    m.params["fc0.weight"].data = np.eye(C)
    return m


def balanced_onehots(C, per):
    labels = np.repeat(np.arange(C), per)
    return LabeledDataset(np.eye(C)[labels] * 5.0, labels, C)


def lt_split(rho, seed=0, C=4, d=6, n_max=150, separation=4.0):
    pool = gen_gaussian_mix(GaussianMixSpec(C, d, n_max + 60, separation=separation, seed=seed))
    val, rest = carve_validation(pool, 40, seed=1)
    train = make_longtail(rest, LongTailSpec(C, n_max, rho, seed=2))
    test = gen_gaussian_mix(GaussianMixSpec(C, d, 100, separation=separation, seed=seed, noise_seed=77))
    return train, val, test


def test_perfect_predictor():
    test = balanced_onehots(10, 5)
    m = evaluate(identity_model(10), test)
    assert m.accuracy == 1.0
    assert np.array_equal(m.confusion, 5 * np.eye(10, dtype=np.int64))


def test_constant_predictor_ties_go_to_class_zero():
    test = balanced_onehots(10, 7)
    m = evaluate(zero_params(MlpSpec((10, 10))), test)
    assert m.accuracy == pytest.approx(0.1, abs=1e-15)
    assert m.confusion[:, 0].sum() == 70


def test_metric_consistency():
    rng = np.random.default_rng(0)
    test = LabeledDataset(rng.normal(size=(90, 4)), rng.integers(0, 3, 90), 3)
    m = evaluate(init_params(MlpSpec((4, 3)), 1), test, train_counts=[50, 20, 5])
    assert m.accuracy == pytest.approx(np.trace(m.confusion) / m.confusion.sum(), rel=1e-15)
    assert m.confusion.sum(axis=1).tolist() == test.counts()
    n = np.asarray(test.counts())
    recomposed = m.head_accuracy * n[m.head_classes].sum() + m.tail_accuracy * n[m.tail_classes].sum()
    assert recomposed == pytest.approx(m.accuracy * n.sum(), rel=1e-12)


def test_head_tail_median_split():
    assert head_tail_split([100, 60, 30, 10]) == ([0, 1], [2, 3])
    assert head_tail_split([5, 5, 5]) == ([0, 1, 2], [])


def test_confusion_rows_true_columns_pred():
    cm = confusion_matrix(np.array([0, 0, 1]), np.array([1, 0, 1]), 2)
    assert cm.tolist() == [[1, 1], [0, 1]]


def test_rows_round_trip_exact(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": 3}, {"a": 1e-300, "b": 4}]
    write_rows(tmp_path / "r.csv", rows)
    back = read_rows(tmp_path / "r.csv")
    assert [float(r["a"]) for r in back] == [0.1 + 0.2, 1e-300]


def test_teacher_fits_balanced_separable_data():
    train, val, test = lt_split(rho=1.0, separation=6.0)
    cfg = TrainConfig(epochs=10, batch_size=32, dtype="float64", milestones=())
    teacher = train_teacher(cfg, MlpSpec((6, 32, 4)), train, val).student
    assert evaluate(teacher, test).accuracy > 0.95


def test_teacher_favours_head_classes():
    train, val, test = lt_split(rho=50.0, separation=2.0)
    cfg = TrainConfig(epochs=10, batch_size=32, dtype="float64", milestones=())
    teacher = train_teacher(cfg, MlpSpec((6, 32, 4)), train, val).student
    m = evaluate(teacher, test, train.counts())
    assert m.head_accuracy > m.tail_accuracy


def test_teacher_training_deterministic():
    train, val, _ = lt_split(rho=10.0)
    cfg = TrainConfig(epochs=2, batch_size=32, dtype="float64")
    a = train_teacher(cfg, MlpSpec((6, 16, 4)), train, val)
    b = train_teacher(cfg, MlpSpec((6, 16, 4)), train, val)
    assert np.array_equal(a.student.flat(), b.student.flat())


def test_alpha_zero_kd_is_ce():
    train, val, _ = lt_split(rho=10.0)
    cfg = TrainConfig(epochs=2, batch_size=32, dtype="float64", alpha=0.0)
    teacher = init_params(MlpSpec((6, 16, 4)), 0)
    kd = train_vanilla_kd(cfg, teacher, init_params(MlpSpec((6, 8, 4)), 1), train, val).student
    ce = train_ce(cfg, init_params(MlpSpec((6, 8, 4)), 1), train, val).student
    assert np.array_equal(kd.flat(), ce.flat())


def test_kd_soft_term_vanishes_when_teacher_matches_student():
    # identical teacher and student logits: the soft term contributes no gradient at the first step
    train, val, _ = lt_split(rho=10.0)
    n = 32
    small = LabeledDataset(train.features[:n], train.labels[:n], 4)
    s = init_params(MlpSpec((6, 8, 4)), 1)
    cfg = TrainConfig(epochs=1, batch_size=n, dtype="float64", alpha=0.5, momentum=0.0, weight_decay=0.0)
    kd = train_vanilla_kd(cfg, init_params(MlpSpec((6, 8, 4)), 1), s, small, val).student
    ce_cfg = TrainConfig(epochs=1, batch_size=n, dtype="float64", momentum=0.0, weight_decay=0.0, eta_theta=0.05)
    ce = train_ce(ce_cfg, init_params(MlpSpec((6, 8, 4)), 1), small, val).student
    np.testing.assert_allclose(kd.flat(), ce.flat(), rtol=0, atol=1e-14)


def test_weight_scatter(tmp_path):
    train, _, _ = lt_split(rho=10.0)
    teacher = init_params(MlpSpec((6, 16, 4)), 0)
    student = init_params(MlpSpec((6, 8, 4)), 1)
    recs = export_weight_scatter(zero_params(MetaNetSpec(8)), teacher, student, train, tmp_path / "w.csv")
    assert len(recs) == len(train)
    assert all(r["w_hard"] == 0.5 and r["w_soft"] == 0.5 and r["ce_teacher"] >= 0 for r in recs)
    with open(tmp_path / "w.csv") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == SCATTER_FIELDS


def test_alpha_sweep_rows():
    train, val, test = lt_split(rho=10.0)
    cfg = TrainConfig(epochs=1, batch_size=64, dtype="float64")
    rows = alpha_sweep(cfg, init_params(MlpSpec((6, 16, 4)), 0), MlpSpec((6, 8, 4)), train, val, test, alphas=(0.1, 0.9))
    assert [r["alpha"] for r in rows] == [0.1, 0.9]
    assert all(0 <= r["accuracy"] <= 1 for r in rows)
