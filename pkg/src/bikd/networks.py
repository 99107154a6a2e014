"""Student/teacher backbones and the meta weight network."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .io import read_container, write_container

_ACTS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2 or any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"MLP needs >= 2 positive widths, got {self.layer_widths}")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"hidden_activation must be relu or tanh, got {self.hidden_activation!r}")
        if self.output_activation not in (None, "sigmoid", "tanh", "relu"):
            raise ValueError(f"bad output_activation {self.output_activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            shapes[f"fc{i}.weight"] = (a, b)
            shapes[f"fc{i}.bias"] = (b,)
        return shapes

    def layer_kinds(self) -> list[str | None]:
        n = len(self.layer_widths) - 1
        return [self.hidden_activation] * (n - 1) + [self.output_activation]

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"MLP expects inputs [B, {self.in_dim}], got {x.shape}")
        h = x
        for i, act in enumerate(self.layer_kinds()):
            h = ad.add_bias(ad.matmul(h, params[f"fc{i}.weight"]), params[f"fc{i}.bias"])
            if act is not None:
                h = _ACTS[act](h)
        return h

    def to_dict(self) -> dict:
        return {"kind": "mlp", **asdict(self), "layer_widths": list(self.layer_widths)}


@dataclass(frozen=True)
class TinyCnnSpec:
    """conv3x3 -> relu -> pool, repeated per channel entry, then a linear head."""

    in_shape: tuple[int, int, int] = (3, 32, 32)
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    classes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd (same padding)")
        h, w = self.in_shape[1:]
        for _ in self.channels:
            if h % 2 or w % 2:
                raise ValueError(f"spatial dims {self.in_shape[1:]} cannot be pooled {len(self.channels)} times")
            h, w = h // 2, w // 2

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self) -> int:
        return self.classes

    def _flat_features(self) -> int:
        h, w = self.in_shape[1:]
        scale = 2 ** len(self.channels)
        return self.channels[-1] * (h // scale) * (w // scale)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.in_shape[0]
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i}.weight"] = (cout, cin, self.kernel, self.kernel)
            shapes[f"conv{i}.bias"] = (cout,)
            cin = cout
        shapes["fc.weight"] = (self._flat_features(), self.classes)
        shapes["fc.bias"] = (self.classes,)
        return shapes

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"TinyCnn expects inputs [B, {self.in_dim}], got {x.shape}")
        h = ad.reshape(x, (x.shape[0], *self.in_shape))
        for i in range(len(self.channels)):
            h = ad.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], padding=self.kernel // 2)
            h = ad.maxpool2x2(ad.relu(h))
        h = ad.reshape(h, (x.shape[0], self._flat_features()))
        return ad.add_bias(ad.matmul(h, params["fc.weight"]), params["fc.bias"])

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"kind": "cnn", **d, "in_shape": list(self.in_shape), "channels": list(self.channels)}


@dataclass(frozen=True)
class MetaNetSpec:
    """f_phi: (teacher CE, student CE) -> (w_hard, w_soft), both in (0, 1)."""

    hidden: int = 64
    seed: int = 0
    clip_inputs: float | None = None

    @property
    def mlp(self) -> MlpSpec:
        return MlpSpec((2, self.hidden, self.hidden, 2), "tanh", "sigmoid", self.seed)

    @property
    def in_dim(self) -> int:
        return 2

    @property
    def out_dim(self) -> int:
        return 2

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return self.mlp.param_shapes()

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        if self.clip_inputs is not None:
            x = Tensor(np.minimum(x.data, self.clip_inputs), dtype=x.dtype)
        return self.mlp.forward(params, x)

    def to_dict(self) -> dict:
        return {"kind": "meta", **asdict(self)}


Spec = Union[MlpSpec, TinyCnnSpec, MetaNetSpec]


def spec_from_dict(d: Mapping) -> Spec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "mlp":
        return MlpSpec(**d)
    if kind == "cnn":
        return TinyCnnSpec(**d)
    if kind == "meta":
        return MetaNetSpec(**d)
    raise ValueError(f"unknown network kind {kind!r}")


@dataclass
class ModelState:
    """Named parameter tensors plus optional optimizer slot arrays."""

    spec: Spec
    params: dict[str, Tensor]
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    seed: int = 0

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        return self.spec.forward(self.params, x)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            n = p.size
            p.data = np.asarray(vec[offset : offset + n], dtype=p.dtype).reshape(p.shape).copy()
            offset += n
        if offset != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, model has {offset}")

    def requires_grad_(self, flag: bool = True) -> "ModelState":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "ModelState":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return ModelState(self.spec, params, {}, self.seed)


def forward(model: ModelState, x: Tensor | np.ndarray) -> Tensor:
    return model.forward(x)


def init_params(spec: Spec, seed: int | None = None, dtype=np.float64) -> ModelState:
    """He init for relu layers, Xavier for everything else; zero biases."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    if isinstance(spec, (MlpSpec, MetaNetSpec)):
        mlp = spec.mlp if isinstance(spec, MetaNetSpec) else spec
        for i, act in enumerate(mlp.layer_kinds()):
            fan_in, fan_out = mlp.layer_widths[i], mlp.layer_widths[i + 1]
            std = np.sqrt(2.0 / fan_in) if act == "relu" else np.sqrt(2.0 / (fan_in + fan_out))
            params[f"fc{i}.weight"] = Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True, dtype=dtype)
            params[f"fc{i}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)
    else:
        for name, shape in spec.param_shapes().items():
            if name.endswith(".bias"):
                arr = np.zeros(shape)
            elif name.startswith("conv"):
                arr = rng.normal(0.0, np.sqrt(2.0 / np.prod(shape[1:])), shape)
            else:
                arr = rng.normal(0.0, np.sqrt(2.0 / sum(shape)), shape)
            params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return ModelState(spec, params, {}, seed)


def zero_params(spec: Spec, dtype=np.float64) -> ModelState:
    params = {k: Tensor(np.zeros(s), requires_grad=True, dtype=dtype) for k, s in spec.param_shapes().items()}
    return ModelState(spec, params, {}, spec.seed)


def clone_state(model: ModelState, include_slots: bool = False) -> ModelState:
    """Deep copy detached from any tape; optimizer slots only on request."""
    params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in model.params.items()}
    slots = copy.deepcopy(model.slots) if include_slots else {}
    return ModelState(model.spec, params, slots, model.seed)


def save_checkpoint(model: ModelState, stem: str | Path, extra: Mapping | None = None) -> Path:
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    for slot, bufs in model.slots.items():
        for k, v in bufs.items():
            arrays[f"slot/{slot}/{k}"] = v
    meta = {"spec": model.spec.to_dict(), "seed": model.seed, "dtype": str(model.dtype)}
    if extra:
        meta.update(extra)
    return write_container(stem, arrays, meta)


def load_checkpoint(stem: str | Path) -> ModelState:
    arrays, meta = read_container(stem)
    spec = spec_from_dict(meta["spec"])
    params: dict[str, Tensor] = {}
    slots: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        kind, rest = name.split("/", 1)
        if kind == "param":
            params[rest] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        else:
            slot, pname = rest.split("/", 1)
            slots.setdefault(slot, {})[pname] = arr
    expected = list(spec.param_shapes())
    if list(params) != expected:
        raise ValueError(f"checkpoint {stem} has parameters {list(params)}, spec expects {expected}")
    return ModelState(spec, params, slots, int(meta["seed"]))
