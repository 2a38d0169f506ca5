"""Fully-connected networks with exact reverse-mode gradients.

Parameters are grouped by name so that multi-head networks (a shared trunk
plus value/advantage or policy/value streams) share one optimizer state.
All math is float64.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

MAGIC = b"DRLK"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")


class ShapeMismatchError(ValueError):
    """Array shapes disagree with the network they are used with."""


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"
    SOFTMAX = "softmax"


_ACTIVATION_CODES = {Activation.RELU: 0, Activation.IDENTITY: 1, Activation.SOFTMAX: 2}


class NetSpec(BaseModel):
    layer_sizes: List[int] = Field(..., description="input size followed by each layer width")
    activations: List[Activation]
    init: str = "uniform_fan_in"
    init_scale: float = 1.0

    @model_validator(mode="after")
    def check_layers(self) -> "NetSpec":
        if len(self.layer_sizes) < 2:
            raise ValueError("need an input size and at least one layer")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ValueError("one activation per layer")
        if any(a is Activation.SOFTMAX for a in self.activations[:-1]):
            raise ValueError("softmax only allowed as the final activation")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.init != "uniform_fan_in":
            raise ValueError(f"unknown init scheme {self.init!r}")
        return self

    @classmethod
    def mlp(cls, n_in: int, hidden: Sequence[int], n_out: int,
            head: Activation = Activation.IDENTITY) -> "NetSpec":
        sizes = [n_in, *hidden, n_out]
        acts = [Activation.RELU] * len(hidden) + [head]
        return cls(layer_sizes=sizes, activations=acts)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: Activation

    @property
    def fan_in(self) -> int:
        return self.W.shape[0]

    @property
    def fan_out(self) -> int:
        return self.W.shape[1]


@dataclass
class Params:
    """Named groups of layers, e.g. ``trunk`` (theta), ``advantage`` (alpha), ``value`` (beta)."""

    groups: Dict[str, List[Layer]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> List[Layer]:
        return self.groups[name]

    def arrays(self) -> Iterator[np.ndarray]:
        for layers in self.groups.values():
            for layer in layers:
                yield layer.W
                yield layer.b

    def copy(self) -> "Params":
        return Params({
            name: [Layer(l.W.copy(), l.b.copy(), l.activation) for l in layers]
            for name, layers in self.groups.items()
        })

    def zeros_like(self) -> "Params":
        return Params({
            name: [Layer(np.zeros_like(l.W), np.zeros_like(l.b), l.activation) for l in layers]
            for name, layers in self.groups.items()
        })

    def assign(self, other: "Params") -> None:
        for dst, src in zip(self.arrays(), other.arrays()):
            dst[...] = src

    def n_layers(self) -> int:
        return sum(len(layers) for layers in self.groups.values())


Grads = Params


def init_layers(spec: NetSpec, rng: np.random.Generator) -> List[Layer]:
    layers = []
    for n_in, n_out, act in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:], spec.activations):
        bound = spec.init_scale / np.sqrt(n_in)
        W = rng.uniform(-bound, bound, size=(n_in, n_out))
        layers.append(Layer(W=W, b=np.zeros(n_out), activation=act))
    return layers


def init_params(spec: NetSpec, rng: np.random.Generator, group: str = "trunk") -> Params:
    return Params({group: init_layers(spec, rng)})


@dataclass
class Activations:
    """Per-layer values recorded by ``forward`` for ``backward``."""

    inputs: np.ndarray
    pre: List[np.ndarray]
    post: List[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _apply(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.SOFTMAX:
        return softmax(z)
    return z


def forward_layers(layers: Sequence[Layer], x: np.ndarray) -> Activations:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layers[0].fan_in:
        raise ShapeMismatchError(f"input length {x.shape[-1]} != {layers[0].fan_in}")
    pre, post = [], []
    h = x
    for layer in layers:
        z = h @ layer.W + layer.b
        h = _apply(layer.activation, z)
        pre.append(z)
        post.append(h)
    return Activations(inputs=x, pre=pre, post=post)


def backward_layers(layers: Sequence[Layer], acts: Activations,
                    output_grad: np.ndarray) -> Tuple[List[Layer], np.ndarray]:
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != acts.output.shape:
        raise ShapeMismatchError(f"output grad shape {g.shape} != {acts.output.shape}")
    grads: List[Layer] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation is Activation.RELU:
            dz = g * (acts.pre[i] > 0)
        elif layer.activation is Activation.SOFTMAX:
            s = acts.post[i]
            dz = s * (g - np.sum(g * s, axis=-1, keepdims=True))
        else:
            dz = g
        h_in = acts.inputs if i == 0 else acts.post[i - 1]
        if dz.ndim == 1:
            dW = np.outer(h_in, dz)
            db = dz.copy()
        else:
            dW = h_in.T @ dz
            db = dz.sum(axis=0)
        grads[i] = Layer(dW, db, layer.activation)
        g = dz @ layer.W.T
    return grads, g


def forward(params: Params, x: np.ndarray, group: str = "trunk") -> Activations:
    """Run one parameter group on ``x`` (a vector or a batch of rows)."""
    return forward_layers(params[group], x)


def backward(params: Params, acts: Activations, output_grad: np.ndarray,
             group: str = "trunk") -> Tuple[Grads, np.ndarray]:
    """Gradients of all layers in ``group`` and of the input."""
    layer_grads, input_grad = backward_layers(params[group], acts, output_grad)
    grads = params.zeros_like()
    grads.groups[group] = layer_grads
    return grads, input_grad


def add_grads(total: Grads, part: Grads) -> Grads:
    for dst, src in zip(total.arrays(), part.arrays()):
        dst += src
    return total


def global_norm(grads: Grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays())))


def clip_by_global_norm(grads: Grads, max_norm: float) -> Grads:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.arrays():
            g *= scale
    return grads


class OptimizerKind(str, Enum):
    SGD = "sgd"
    RMSPROP = "rmsprop"
    ADAM = "adam"


@dataclass
class OptState:
    kind: OptimizerKind
    lr: float
    rho: float = 0.99
    eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    t: int = 0
    slots: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    @classmethod
    def sgd(cls, lr: float = 1e-2) -> "OptState":
        return cls(OptimizerKind.SGD, lr)

    @classmethod
    def rmsprop(cls, lr: float = 7e-4, rho: float = 0.99, eps: float = 1e-6) -> "OptState":
        return cls(OptimizerKind.RMSPROP, lr, rho=rho, eps=eps)

    @classmethod
    def adam(cls, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "OptState":
        return cls(OptimizerKind.ADAM, lr, eps=eps, beta1=beta1, beta2=beta2)

    def _slot(self, name: str, params: List[np.ndarray]) -> List[np.ndarray]:
        if name not in self.slots:
            self.slots[name] = [np.zeros_like(p) for p in params]
        return self.slots[name]


def optimizer_step(opt: OptState, params: Params, grads: Grads) -> Tuple[OptState, Params]:
    """Apply one update in place and return ``(opt, params)``."""
    ps = list(params.arrays())
    gs = list(grads.arrays())
    if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
        raise ShapeMismatchError("grads are not congruent with params")

    if opt.kind is OptimizerKind.SGD:
        for p, g in zip(ps, gs):
            p -= opt.lr * g
    elif opt.kind is OptimizerKind.RMSPROP:
        cache = opt._slot("cache", ps)
        for p, g, c in zip(ps, gs, cache):
            c *= opt.rho
            c += (1.0 - opt.rho) * g * g
            p -= opt.lr * g / np.sqrt(c + opt.eps)
    elif opt.kind is OptimizerKind.ADAM:
        m = opt._slot("m", ps)
        v = opt._slot("v", ps)
        opt.t += 1
        c1 = 1.0 - opt.beta1 ** opt.t
        c2 = 1.0 - opt.beta2 ** opt.t
        for p, g, mi, vi in zip(ps, gs, m, v):
            mi *= opt.beta1
            mi += (1.0 - opt.beta1) * g
            vi *= opt.beta2
            vi += (1.0 - opt.beta2) * g * g
            p -= opt.lr * (mi / c1) / (np.sqrt(vi / c2) + opt.eps)
    return opt, params


def save_params(path: Union[str, Path], params: Params) -> None:
    """Write params in the flat binary layout described in docs/PARAMS_FORMAT.md."""
    chunks = [HEADER.pack(MAGIC, FORMAT_VERSION, params.n_layers(), 0)]
    for name, layers in params.groups.items():
        encoded = name.encode("utf-8")
        for layer in layers:
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<BII", _ACTIVATION_CODES[layer.activation],
                                      layer.fan_in, layer.fan_out))
            chunks.append(layer.W.astype("<f8").tobytes())
            chunks.append(layer.b.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: Union[str, Path]) -> Params:
    data = Path(path).read_bytes()
    magic, version, n_layers, _ = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a params file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    offset = HEADER.size
    params = Params()
    for _ in range(n_layers):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, fan_in, fan_out = struct.unpack_from("<BII", data, offset)
        offset += struct.calcsize("<BII")
        n_w = fan_in * fan_out
        W = np.frombuffer(data, dtype="<f8", count=n_w, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * n_w
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        params.groups.setdefault(name, []).append(
            Layer(W.astype(np.float64), b.astype(np.float64), codes[code])
        )
    return params
