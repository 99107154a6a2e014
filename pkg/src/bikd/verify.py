"""Double-precision property suites driven by ``bikd verify``.

Each suite returns a JSON-serializable report ``{"suite", "passed", "checks"}``
where every check carries its measured value and tolerance.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bilevel import (
    BilevelTrainer,
    StudentGraph,
    explicit_hypergrad,
    fd_hypergrad,
    virtual_step,
)
from .config import TrainConfig
from .data import LabeledDataset, LongTailSpec, carve_validation, class_counts, make_longtail
from .losses import hard_loss, one_hot, soft_ce_loss, soft_loss
from .networks import MetaNetSpec, MlpSpec, TinyCnnSpec, init_params
from .reference import OnlineReweighter

FD_STEP = 1e-5


def _check(name: str, value: float, tol: float, passed: bool | None = None) -> dict:
    ok = bool(value < tol) if passed is None else bool(passed)
    return {"name": name, "value": float(value), "tolerance": tol, "passed": ok}


def _report(suite: str, checks: list[dict]) -> dict:
    return {"suite": suite, "passed": all(c["passed"] for c in checks), "checks": checks}


# ------------------------------------------------------------ gradcheck


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max |n| (floored), a norm-wise relative error."""
    denom = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / denom


def gradcheck(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator) -> float:
    """Max relative error between reverse-mode gradients and central differences.

    The output is reduced to a scalar with a fixed random projection so every
    output entry contributes.
    """
    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    out = build(leaves)
    proj = rng.normal(size=out.shape)

    def scalar(ts):
        o = build(ts)
        return ad.sum_all(ad.mul(o, Tensor(proj)))

    analytic = ad.grad(scalar(leaves), leaves)
    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        def f():
            with ad.no_grad():
                return scalar(leaves).item()

        worst = max(worst, rel_error(a, numeric_grad(f, leaf.data)))
    return worst


def jvp_vjp_gap(build, inputs, rng) -> float:
    """|<J t, r> - <t, J^T r>| relative; checks forward rules against reverse rules."""
    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    out = build(leaves)
    r = rng.normal(size=out.shape)
    ts = [rng.normal(size=x.shape) for x in inputs]
    (jt,) = ad.jvp([out], [(leaf, t) for leaf, t in zip(leaves, ts)])
    vj = ad.grad(out, leaves, grad_output=r)
    lhs = float(np.sum(jt * r))
    rhs = float(sum(np.sum(t * v) for t, v in zip(ts, vj)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)


def _onehot_rows(rng, B, C):
    return one_hot(rng.integers(0, C, B), C)


def gradcheck_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    n = rng.normal
    y = _onehot_rows(rng, 3, 4)
    t_logits = n(size=(3, 4)) * 2
    mlp = MlpSpec((5, 7, 4), "tanh")
    mlp_relu = MlpSpec((5, 6, 4), "relu")
    meta = MetaNetSpec(hidden=6)
    cnn = TinyCnnSpec(in_shape=(2, 4, 4), channels=(3,), kernel=3, classes=4)
    x_mlp = n(size=(3, 5))
    x_cnn = n(size=(3, 32))
    pairs = np.abs(n(size=(4, 2))) * 3

    def model_case(spec, x, head):
        shapes = list(spec.param_shapes().items())
        init = init_params(spec, int(rng.integers(1 << 30)))
        arrays = [init.params[k].data.copy() for k, _ in shapes]

        def build(ts):
            params = {k: t for (k, _), t in zip(shapes, ts)}
            return head(spec.forward(params, Tensor(x)))

        return build, arrays

    cases = {
        "matmul": (lambda t: ad.matmul(t[0], t[1]), [n(size=(3, 4)), n(size=(4, 2))]),
        "add": (lambda t: ad.add(t[0], t[1]), [n(size=(3, 4)), n(size=(3, 4))]),
        "sub": (lambda t: ad.sub(t[0], t[1]), [n(size=(3, 4)), n(size=(3, 4))]),
        "mul": (lambda t: ad.mul(t[0], t[1]), [n(size=(3, 4)), n(size=(3, 4))]),
        "scale": (lambda t: ad.scale(t[0], 2.5), [n(size=(3, 4))]),
        "relu": (lambda t: ad.relu(t[0]), [n(size=(3, 4))]),
        "tanh": (lambda t: ad.tanh(t[0]), [n(size=(3, 4))]),
        "sigmoid": (lambda t: ad.sigmoid(t[0]), [n(size=(3, 4))]),
        "exp": (lambda t: ad.exp(t[0]), [n(size=(3, 4))]),
        "add_bias": (lambda t: ad.add_bias(t[0], t[1]), [n(size=(3, 4)), n(size=4)]),
        "log_softmax_t1": (lambda t: ad.log_softmax(t[0], 1.0), [n(size=(3, 4))]),
        "log_softmax_t4": (lambda t: ad.log_softmax(t[0], 4.0), [n(size=(3, 4))]),
        "row_sum": (lambda t: ad.row_sum(t[0]), [n(size=(3, 4))]),
        "mean": (lambda t: ad.mean(t[0]), [n(size=(3, 4))]),
        "column": (lambda t: ad.column(t[0], 1), [n(size=(3, 4))]),
        "reshape": (lambda t: ad.reshape(t[0], (4, 3)), [n(size=(3, 4))]),
        "slice_view": (lambda t: ad.slice_view(t[0], 2, (2, 3)), [n(size=10)]),
        "conv2d": (lambda t: ad.conv2d(t[0], t[1], t[2], padding=1), [n(size=(2, 2, 4, 4)), n(size=(3, 2, 3, 3)), n(size=3)]),
        "maxpool2x2": (lambda t: ad.maxpool2x2(t[0]), [n(size=(2, 2, 4, 4))]),
        "mlp_hard_loss": model_case(mlp, x_mlp, lambda z: ad.mean(hard_loss(z, y))),
        "mlp_soft_loss_tau4": model_case(mlp, x_mlp, lambda z: ad.mean(soft_loss(t_logits, z, 4.0))),
        "mlp_relu_hard_loss": model_case(mlp_relu, x_mlp, lambda z: ad.mean(hard_loss(z, y))),
        "metanet": model_case(meta, pairs, lambda z: z),
        "tinycnn_hard_loss": model_case(cnn, x_cnn, lambda z: ad.mean(hard_loss(z, y))),
    }
    return cases


def suite_gradcheck(seeds: int = 20, tol: float = 1e-5) -> dict:
    worst: dict[str, float] = {}
    worst_jvp: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, (build, inputs) in gradcheck_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), gradcheck(build, inputs, rng))
            worst_jvp[name] = max(worst_jvp.get(name, 0.0), jvp_vjp_gap(build, inputs, rng))
    checks = [_check(f"grad:{k}", v, tol) for k, v in worst.items()]
    checks += [_check(f"jvp:{k}", v, 1e-10) for k, v in worst_jvp.items()]
    return _report("gradcheck", checks)


# ------------------------------------------------------------ hypergradients


def random_window(k: int, seed: int, B: int = 6, d: int = 6, C: int = 4, hidden: int = 16, meta_hidden: int = 8, lr: float = 0.5):
    """Run ``k`` batches of the trainer with a strict window and return the recorded window."""
    rng = np.random.default_rng(seed)
    s_spec = MlpSpec((d, hidden, C), "tanh")
    m_spec = MetaNetSpec(hidden=meta_hidden)
    student = init_params(s_spec, int(rng.integers(1 << 30)))
    meta = init_params(m_spec, int(rng.integers(1 << 30)))
    for p in meta.tensors():
        p.data = p.data * 2.0  # move away from the flat region so gradients are not tiny
    cfg = TrainConfig(k=k, strict_window=True, dtype="float64", eta_theta=lr, eta_phi=1e-3)
    trainer = BilevelTrainer(cfg, student, meta, keep_records=True)
    for _ in range(k):
        x = rng.normal(size=(B, d))
        y = _onehot_rows(rng, B, C)
        t = rng.normal(size=(B, C)) * 3
        vx = rng.normal(size=(B, d))
        vy = _onehot_rows(rng, B, C)
        trainer.run_batch(x, y, t, vx, vy)
    return trainer.last_window, s_spec, m_spec, cfg


def compare_paths(window, s_spec, m_spec, tau: float) -> dict[str, float]:
    a = window.hypergrad
    b = explicit_hypergrad(window.records, s_spec, m_spec, tau)
    c = fd_hypergrad(window.records, s_spec, m_spec, tau, step=1e-4)
    mask = np.abs(c) > 1e-6
    ab = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
    ac = float(np.max(np.abs(a - c)[mask] / np.abs(c)[mask])) if mask.any() else 0.0
    bc = float(np.max(np.abs(b - c)[mask] / np.abs(c)[mask])) if mask.any() else 0.0
    return {"autodiff_vs_explicit": ab, "autodiff_vs_fd": ac, "explicit_vs_fd": bc, "coords": int(mask.sum())}


def suite_hypergrad(ks: Sequence[int] = (1, 2, 3, 5), seeds: Sequence[int] = (0, 1)) -> dict:
    checks = []
    for k in ks:
        for seed in seeds:
            window, s, m, cfg = random_window(k, seed)
            r = compare_paths(window, s, m, cfg.tau)
            checks.append(_check(f"k={k},seed={seed}:autodiff_vs_explicit", r["autodiff_vs_explicit"], 1e-8))
            checks.append(_check(f"k={k},seed={seed}:autodiff_vs_fd", r["autodiff_vs_fd"], 1e-4))
            checks.append(_check(f"k={k},seed={seed}:explicit_vs_fd", r["explicit_vs_fd"], 1e-4))
    toy = toy_hypergrad()
    checks.append(_check("toy_closed_form", toy["rel_error"], 1e-6))
    return _report("hypergrad", checks)


class _ToySpec:
    def param_shapes(self):
        return {"theta": (1,)}


class QuadraticToy(StudentGraph):
    """One scalar parameter, one sample: hard = (theta - a)^2, soft = (theta - b)^2."""

    def __init__(self, theta: float, a: float, b: float):
        self.spec = _ToySpec()
        self.theta = np.array([theta])
        leaf = Tensor(self.theta.copy(), requires_grad=True)
        self.leaves = [leaf]
        da = ad.sub(leaf, Tensor([a]))
        db = ad.sub(leaf, Tensor([b]))
        self.l_hard = ad.mul(da, da)
        self.l_soft = ad.mul(db, db)


def toy_hypergrad(theta=1.0, a=0.0, b=2.0, c=0.5, phi=(0.3, -0.7), lr=0.1) -> dict:
    """Autodiff through the virtual step vs the hand-derived closed form."""
    graph = QuadraticToy(theta, a, b)
    phis = Tensor(np.array(phi), requires_grad=True)
    w = ad.sigmoid(phis)
    w_h = ad.slice_view(w, 0, (1,))
    w_s = ad.slice_view(w, 1, (1,))
    tp = virtual_step(graph, w_h, w_s, lr)
    dv = ad.sub(tp, Tensor([c]))
    (g,) = ad.grad(ad.sum_all(ad.mul(dv, dv)), [phis])

    sig = 1.0 / (1.0 + np.exp(-np.asarray(phi)))
    tprime = theta - lr * (sig[0] * 2 * (theta - a) + sig[1] * 2 * (theta - b))
    closed = np.array(
        [
            2 * (tprime - c) * (-lr * 2 * (theta - a)) * sig[0] * (1 - sig[0]),
            2 * (tprime - c) * (-lr * 2 * (theta - b)) * sig[1] * (1 - sig[1]),
        ]
    )
    err = float(np.max(np.abs(g - closed) / np.abs(closed)))
    return {"autodiff": g.tolist(), "closed_form": closed.tolist(), "rel_error": err}


# ------------------------------------------------------------ equivalences


def kl_ce_equivalence(instances: int = 20, tau: float = 4.0) -> float:
    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng(1000 + seed)
        B, C = 5, 7
        t = rng.normal(size=(B, C)) * 3
        s = Tensor(rng.normal(size=(B, C)) * 3, requires_grad=True)
        (g_kl,) = ad.grad(ad.sum_all(soft_loss(t, s, tau)), [s])
        (g_ce,) = ad.grad(ad.sum_all(soft_ce_loss(t, s, tau)), [s])
        worst = max(worst, float(np.max(np.abs(g_kl - g_ce))))
    return worst


def online_reduction(batches: int = 50, seed: int = 0) -> bool:
    """Windowed trainer at k=1 vs the standalone online loop: bitwise-identical phi trajectories."""
    rng = np.random.default_rng(seed)
    d, C, B = 6, 4, 8
    s_spec = MlpSpec((d, 12, C), "relu")
    m_spec = MetaNetSpec(hidden=8)
    cfg = TrainConfig(k=1, dtype="float64", eta_theta=0.1, eta_phi=1e-2)
    st_a, mt_a = init_params(s_spec, 11), init_params(m_spec, 12)
    st_b, mt_b = init_params(s_spec, 11), init_params(m_spec, 12)
    windowed = BilevelTrainer(cfg, st_a, mt_a)
    online = OnlineReweighter(cfg, st_b, mt_b)
    for _ in range(batches):
        x = rng.normal(size=(B, d))
        y = _onehot_rows(rng, B, C)
        t = rng.normal(size=(B, C)) * 2
        vx = rng.normal(size=(B, d))
        vy = _onehot_rows(rng, B, C)
        rep = windowed.run_batch(x, y, t, vx, vy)
        phi_online = online.step(x, y, t, vx, vy)
        if not rep.meta_updated or not np.array_equal(windowed.meta.flat(), phi_online):
            return False
        if not np.array_equal(windowed.student.flat(), online.student.flat()):
            return False
    return True


def fixed_alpha_reproduction(batches: int = 20, alpha: float = 0.3, seed: int = 0) -> bool:
    """Bilevel loop with pinned (1 - alpha, alpha) weights vs the fixed-alpha KD loop, batch by batch."""
    from .baselines import train_vanilla_kd
    from .bilevel import fit

    rng = np.random.default_rng(seed)
    C, d = 4, 6
    B = 8
    n = B * batches
    train = LabeledDataset(rng.normal(size=(n, d)), rng.integers(0, C, n), C)
    val = LabeledDataset(rng.normal(size=(16, d)), rng.integers(0, C, 16), C)
    teacher = init_params(MlpSpec((d, 16, C)), 5)
    s_spec = MlpSpec((d, 10, C))
    cfg = TrainConfig(epochs=1, batch_size=B, dtype="float64", alpha=alpha, eta_phi=0.0,
                      pinned_weights=(1.0 - alpha, alpha), seed=seed)
    kd = train_vanilla_kd(cfg, teacher, init_params(s_spec, 9), train, val).student
    bk = fit(cfg, train, val, teacher, init_params(s_spec, 9)).student
    return bool(np.array_equal(kd.flat(), bk.flat()))


def suite_equivalence() -> dict:
    checks = [
        _check("kl_vs_soft_ce_grad", kl_ce_equivalence(), 1e-9),
        _check("k1_online_reduction", 0.0, 1.0, passed=online_reduction()),
        _check("fixed_alpha_reproduction", 0.0, 1.0, passed=fixed_alpha_reproduction()),
    ]
    return _report("equivalence", checks)


# ------------------------------------------------------------ data


def suite_data(rho: float = 100.0, n_max: int = 5000, classes: int = 10, val_total: int = 1000) -> dict:
    counts = class_counts(LongTailSpec(classes, n_max, rho))
    expected_last = max(1, int(round(n_max / rho)))
    checks = [
        _check("first_count", abs(counts[0] - n_max), 0.5),
        _check("last_count", abs(counts[-1] - expected_last), 0.5),
        _check("nonincreasing", 0.0, 1.0, passed=all(a >= b for a, b in zip(counts, counts[1:]))),
    ]
    per = n_max + val_total // classes
    pool = LabeledDataset(np.arange(per * classes, dtype=np.float64)[:, None], np.repeat(np.arange(classes), per), classes)
    val, rest = carve_validation(pool, val_total)
    lt = make_longtail(rest, LongTailSpec(classes, n_max, rho))
    realized = lt.counts()
    checks.append(_check("realized_ratio_rel_err", abs(max(realized) / min(realized) - rho) / rho, 0.02))
    checks.append(_check("val_balanced", 0.0, 1.0, passed=len(set(val.counts())) == 1 and sum(val.counts()) == val_total))
    overlap = np.intersect1d(val.features[:, 0], lt.features[:, 0]).size
    checks.append(_check("val_disjoint", float(overlap), 0.5))
    report = _report("data", checks)
    report["counts"] = counts
    return report


SUITES = {
    "gradcheck": suite_gradcheck,
    "hypergrad": suite_hypergrad,
    "equivalence": suite_equivalence,
    "data": suite_data,
}
