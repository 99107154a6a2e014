"""Dense tensors with a dynamic reverse-mode tape.

Each op records its parents and two local rules: a vector-Jacobian product
(used by :func:`backward` / :func:`grad`) and a Jacobian-vector product (used
by :func:`jvp`).  The forward-mode sweep is what lets the bilevel engine push
a validation cotangent back through a virtual SGD step without generic
second-order differentiation.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_recording",
    "tensor",
    "backward",
    "grad",
    "jvp",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_bias",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log_softmax",
    "sum_all",
    "mean",
    "row_sum",
    "column",
    "reshape",
    "slice_view",
    "conv2d",
    "maxpool2x2",
    "elementwise",
    "custom_op",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class _TapeMode(threading.local):
    recording = True


_mode = _TapeMode()


def is_recording() -> bool:
    return _mode.recording


@contextlib.contextmanager
def no_grad():
    """Freeze the tape: tensors produced inside carry no history."""
    prev = _mode.recording
    _mode.recording = False
    try:
        yield
    finally:
        _mode.recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_jvp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._jvp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad_output=None) -> None:
        backward(self, grad_output)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, jvp: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _mode.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._jvp = jvp
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, jvp: Callable) -> Tensor:
    """Record a user-defined op; ``vjp(g)`` returns one array per parent, ``jvp(*tangents)`` one array."""
    return _make(np.asarray(data), parents, vjp, jvp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lin(*terms):
    """Sum the non-None tangent contributions; None means zero."""
    acc = None
    for t in terms:
        if t is None:
            continue
        acc = t if acc is None else acc + t
    return acc


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _make(
        A @ B,
        (a, b),
        lambda g: (g @ B.T, A.T @ g),
        lambda ta, tb: _lin(None if ta is None else ta @ B, None if tb is None else A @ tb),
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), lambda ta, tb: _lin(ta, tb))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (g, -g),
        lambda ta, tb: _lin(ta, None if tb is None else -tb),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make(
        A * B,
        (a, b),
        lambda g: (g * B, g * A),
        lambda ta, tb: _lin(None if ta is None else ta * B, None if tb is None else A * tb),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), lambda ta: -ta)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), lambda ta: ta * c)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: ``x[B, n] + b[n]`` (the only broadcast we support)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return _make(
        x.data + b.data,
        (x, b),
        lambda g: (g, g.sum(axis=0)),
        lambda tx, tb: _lin(tx, None if tb is None else np.broadcast_to(tb, x.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), lambda ta: ta * mask)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    d = 1.0 - y * y
    return _make(y, (a,), lambda g: (g * d,), lambda ta: ta * d)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    d = y * (1.0 - y)
    return _make(y, (a,), lambda g: (g * d,), lambda ta: ta * d)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), lambda ta: ta * y)


def log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise ``log softmax(logits / temperature)`` via max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if logits.data.ndim != 2:
        raise ShapeError(f"log_softmax expects a [B, C] matrix, got {logits.shape}")
    inv = 1.0 / float(temperature)
    z = logits.data * inv
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) * inv,)

    def jvp_(t):
        t = t * inv
        return t - (p * t).sum(axis=1, keepdims=True)

    return _make(out, (logits,), vjp, jvp_)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    # cumsum accumulates strictly in index order, unlike pairwise np.sum
    total = np.cumsum(a.data.reshape(-1))[-1] if a.size else a.dtype.type(0)
    return _make(
        np.asarray(total, dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=a.dtype),),
        lambda ta: np.asarray(ta.sum(), dtype=a.dtype),
    )


def mean(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def row_sum(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"row_sum expects a matrix, got {a.shape}")
    return _make(
        a.data.sum(axis=1),
        (a,),
        lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),),
        lambda ta: ta.sum(axis=1),
    )


def column(a: Tensor, j: int) -> Tensor:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=a.dtype)
        out[:, j] = g
        return (out,)

    return _make(a.data[:, j].copy(), (a,), vjp, lambda ta: ta[:, j])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    shape = tuple(shape)
    return _make(
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(old),),
        lambda ta: ta.reshape(shape),
    )


def slice_view(flat: Tensor, start: int, shape: Sequence[int]) -> Tensor:
    """Carve a parameter-shaped block out of a flat vector."""
    shape = tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    stop = start + n
    if flat.data.ndim != 1 or stop > flat.size:
        raise ShapeError(f"slice_view: [{start}:{stop}] out of range for {flat.shape}")
    total = flat.size

    def vjp(g):
        out = np.zeros(total, dtype=flat.dtype)
        out[start:stop] = g.reshape(-1)
        return (out,)

    return _make(
        flat.data[start:stop].reshape(shape),
        (flat,),
        vjp,
        lambda t: t[start:stop].reshape(shape),
    )


def _conv_fwd(X: np.ndarray, W: np.ndarray, pad: int) -> np.ndarray:
    _, _, kh, kw = W.shape
    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
    H = Xp.shape[2] - kh + 1
    Wd = Xp.shape[3] - kw + 1
    out = np.zeros((X.shape[0], W.shape[0], H, Wd), dtype=X.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = Xp[:, :, i : i + H, j : j + Wd]
            out += np.einsum("bchw,oc->bohw", patch, W[:, :, i, j])
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2D convolution, ``x[B,C,H,W]`` with ``w[O,C,kh,kw]``."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    X, K = x.data, w.data
    kh, kw = K.shape[2:]
    out = _conv_fwd(X, K, padding)
    H, Wd = out.shape[2:]

    def vjp(g):
        Xp = np.pad(X, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else X
        gx = np.zeros_like(Xp)
        gw = np.zeros_like(K)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + H, j : j + Wd] += np.einsum("bohw,oc->bchw", g, K[:, :, i, j])
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, Xp[:, :, i : i + H, j : j + Wd])
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    def jvp_(tx, tw):
        return _lin(
            None if tx is None else _conv_fwd(tx, K, padding),
            None if tw is None else _conv_fwd(X, tw, padding),
        )

    y = _make(out, (x, w), vjp, jvp_)
    if b is not None:
        y = _bias4(y, b)
    return y


def _bias4(y: Tensor, b: Tensor) -> Tensor:
    return _make(
        y.data + b.data[None, :, None, None],
        (y, b),
        lambda g: (g, g.sum(axis=(0, 2, 3))),
        lambda ty, tb: _lin(ty, None if tb is None else np.broadcast_to(tb[None, :, None, None], y.shape)),
    )


def maxpool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    onehot = np.zeros_like(blocks)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)

    def unblock(a):
        return a.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)

    def block(a):
        return a.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)

    return _make(
        np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0],
        (x,),
        lambda g: (unblock(onehot * g[..., None]),),
        lambda t: (block(t) * onehot).sum(axis=-1),
    )


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "neg": neg, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name; ``scale`` takes ``(tensor, float)``."""
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------- sweeps


def _topo(outputs: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
    return order


def _reverse_sweep(output: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(_topo([output])):
        g = grads.get(id(node))
        if g is None or not node._parents:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads


def _seed(output: Tensor, grad_output) -> np.ndarray:
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"backward needs a scalar output or grad_output, got shape {output.shape}")
        return np.ones(output.shape, dtype=output.dtype)
    g = np.asarray(grad_output, dtype=output.dtype)
    if g.shape != output.shape:
        raise ShapeError(f"grad_output shape {g.shape} does not match output {output.shape}")
    return g


def backward(loss: Tensor, grad_output=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not loss.requires_grad:
        raise ValueError("backward called on a tensor that was not recorded on a live tape")
    grads = _reverse_sweep(loss, _seed(loss, grad_output))
    for node in _topo([loss]):
        if node._parents or not node.requires_grad:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None) -> list[np.ndarray]:
    """Functional gradient: returns arrays and leaves ``.grad`` untouched.

    Inputs unreachable from ``output`` get zero arrays.
    """
    if not output.requires_grad:
        return [np.zeros_like(x.data) for x in inputs]
    grads = _reverse_sweep(output, _seed(output, grad_output))
    return [grads[id(x)] if id(x) in grads else np.zeros_like(x.data) for x in inputs]


def jvp(outputs: Sequence[Tensor], tangents: dict[int, np.ndarray] | Sequence[tuple[Tensor, np.ndarray]]) -> list[np.ndarray]:
    """Forward-mode sweep over recorded history.

    ``tangents`` maps leaf tensors (as ``(tensor, array)`` pairs or an
    ``id -> array`` dict) to directions; returns the directional derivative of
    each output.
    """
    if not isinstance(tangents, dict):
        tangents = {id(t): np.asarray(v) for t, v in tangents}
    tan: dict[int, np.ndarray | None] = dict(tangents)
    for node in _topo(outputs):
        if not node._parents:
            continue
        args = [tan.get(id(p)) for p in node._parents]
        tan[id(node)] = None if all(a is None for a in args) else node._jvp(*args)
    return [np.zeros_like(o.data) if tan.get(id(o)) is None else np.asarray(tan[id(o)]) for o in outputs]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
