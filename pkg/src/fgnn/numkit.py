"""Dense tensor and feed-forward network primitives.

Everything is float64 and row-major (last index fastest). Objects are
treated as immutable once built; arrays are marked read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

ACTIVATIONS = ("relu", "identity")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def row_major_index(shape: Sequence[int], multi_index: Sequence[int]) -> int:
    """Flat offset of ``multi_index`` in a row-major array of ``shape``."""
    if len(multi_index) != len(shape):
        raise IndexError(f"index of length {len(multi_index)} for shape {tuple(shape)}")
    offset = 0
    for extent, i in zip(shape, multi_index):
        i = int(i)
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(multi_index)} out of bounds for shape {tuple(shape)}")
        offset = offset * extent + i
    return offset


@dataclass(frozen=True)
class Tensor:
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        values = _frozen(self.values).reshape(-1)
        if values.size != math.prod(shape):
            raise ShapeError(f"{values.size} values for shape {shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, a) -> "Tensor":
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape, a.reshape(-1))

    def as_array(self) -> np.ndarray:
        """Read-only view with the tensor's shape."""
        return self.values.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.values.size


def tensor_at(t: Tensor, multi_index: Sequence[int]) -> float:
    return float(t.values[row_major_index(t.shape, multi_index)])


@dataclass(frozen=True)
class DenseLayer:
    """``activation(weight @ x + bias)``; weight has shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = _frozen(self.weight)
        b = _frozen(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"weight {w.shape} and bias {b.shape} do not match")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class DenseNet:
    """Chain of dense layers. With no layers it is the identity on ``in_dim``."""

    layers: tuple[DenseLayer, ...]
    in_dim: int

    def __post_init__(self):
        layers = tuple(self.layers)
        dim = int(self.in_dim)
        for k, layer in enumerate(layers):
            if layer.in_dim != dim:
                raise ShapeError(f"layer {k} expects {layer.in_dim} inputs, previous gives {dim}")
            dim = layer.out_dim
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "in_dim", int(self.in_dim))

    @classmethod
    def from_layers(cls, layers: Sequence[DenseLayer]) -> "DenseNet":
        if not layers:
            raise ShapeError("cannot infer input width of an empty layer list")
        return cls(tuple(layers), layers[0].in_dim)

    @classmethod
    def identity(cls, dim: int) -> "DenseNet":
        return cls((), dim)

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.in_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers]


def apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def net_forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate ``net`` on a vector or on a batch whose last axis is the input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[-1:] or ()} does not match net input {net.in_dim}")
    for layer in net.layers:
        x = apply_activation(x @ layer.weight.T + layer.bias, layer.activation)
    return x


def linear(weight, bias=None, activation: str = "identity") -> DenseNet:
    """Single-layer net, a convenience for hand-built parameters."""
    weight = np.asarray(weight, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return DenseNet.from_layers([DenseLayer(weight, bias, activation)])


def glorot_net(rng: np.random.Generator, widths: Sequence[int], final_activation: str = "identity") -> DenseNet:
    """Random net with uniform Glorot weights and zero biases.

    ``widths`` lists input width then every layer's output width; hidden
    layers use ReLU.
    """
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        act = final_activation if k == len(widths) - 2 else "relu"
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    if not layers:
        return DenseNet.identity(widths[0])
    return DenseNet.from_layers(layers)


def parallel(nets: Sequence[DenseNet]) -> DenseNet:
    """Block-diagonal composition: input and output are concatenations.

    All nets must have equal depth and agree on activation per layer.
    """
    depth = nets[0].depth
    if any(n.depth != depth for n in nets):
        raise ShapeError("parallel composition needs nets of equal depth")
    layers = []
    for k in range(depth):
        acts = {n.layers[k].activation for n in nets}
        if len(acts) != 1:
            raise ShapeError(f"activations disagree at layer {k}: {sorted(acts)}")
        blocks = [n.layers[k].weight for n in nets]
        w = np.zeros((sum(b.shape[0] for b in blocks), sum(b.shape[1] for b in blocks)))
        r = c = 0
        for b in blocks:
            w[r:r + b.shape[0], c:c + b.shape[1]] = b
            r += b.shape[0]
            c += b.shape[1]
        bias = np.concatenate([n.layers[k].bias for n in nets])
        layers.append(DenseLayer(w, bias, acts.pop()))
    if not layers:
        return DenseNet.identity(sum(n.in_dim for n in nets))
    return DenseNet.from_layers(layers)


def precompose(net: DenseNet, weight, bias=None) -> DenseNet:
    """Fold the affine map ``x -> weight @ x + bias`` into the first layer of ``net``."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    if weight.shape[0] != net.in_dim:
        raise ShapeError(f"affine map gives {weight.shape[0]} values, net takes {net.in_dim}")
    if not net.layers:
        return DenseNet.from_layers([DenseLayer(weight, bias)])
    first = net.layers[0]
    merged = DenseLayer(first.weight @ weight, first.weight @ bias + first.bias, first.activation)
    return DenseNet((merged,) + net.layers[1:], weight.shape[1])


def passthrough_net(dim: int, depth: int) -> DenseNet:
    """Identity on ``dim`` channels through ``depth`` layers that alternate
    ReLU and identity activations, using the pair relu(x), relu(-x)."""
    if depth == 0:
        return DenseNet.identity(dim)
    if depth % 2:
        raise ShapeError("passthrough depth must be even")
    eye = np.eye(dim)
    layers = []
    for k in range(depth):
        act = "relu" if k % 2 == 0 else "identity"
        if k == 0:
            w = np.vstack([eye, -eye])
        elif k == depth - 1:
            w = np.hstack([eye, -eye])
        else:
            w = np.eye(2 * dim)
        layers.append(DenseLayer(w, np.zeros(w.shape[0]), act))
    return DenseNet.from_layers(layers)


def net_to_json(net: DenseNet) -> dict:
    return {
        "in_dim": net.in_dim,
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "weight": layer.weight.reshape(-1).tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in net.layers
        ],
    }


def net_from_json(obj: dict) -> DenseNet:
    layers = tuple(
        DenseLayer(np.array(d["weight"], dtype=np.float64).reshape(d["shape"]), d["bias"], d["activation"])
        for d in obj["layers"]
    )
    return DenseNet(layers, obj["in_dim"])
