"""Embedding networks: the 4-block ConvNet for images and a plain MLP for vectors."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BatchTooSmall, InvalidSpec, LengthMismatch, ShapeMismatch
from .numgrad import Graph

ParamSet = dict  # ordered name -> np.ndarray

N_BLOCKS = 4


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str  # "convnet4" | "mlp"
    input_shape: tuple[int, ...]
    width: int = 64
    hidden: tuple[int, ...] = field(default_factory=tuple)
    mlp_output_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        if self.kind == "convnet4":
            if len(self.input_shape) != 3 or self.input_shape[1] != self.input_shape[2]:
                raise InvalidSpec(f"convnet4 needs a square [c, n, n] input, got {list(self.input_shape)}")
            if self.input_shape[1] < 2**N_BLOCKS:
                raise InvalidSpec(f"convnet4 needs n >= {2**N_BLOCKS} to survive four 2x2 pools")
            if self.width < 1 or self.input_shape[0] < 1:
                raise InvalidSpec("convnet4 width and channels must be >= 1")
        elif self.kind == "mlp":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise InvalidSpec(f"mlp needs a [dim] input, got {list(self.input_shape)}")
            if self.mlp_output_dim is None or self.mlp_output_dim < 1 or any(h < 1 for h in self.hidden):
                raise InvalidSpec("mlp layer sizes must be >= 1")
        else:
            raise InvalidSpec(f"unknown embedder kind {self.kind!r}")

    @property
    def output_dim(self) -> int:
        if self.kind == "mlp":
            return int(self.mlp_output_dim)
        n = self.input_shape[1]
        for _ in range(N_BLOCKS):
            n //= 2
        return self.width * n * n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderSpec":
        return cls(**d)


def convnet4(input_shape, width: int = 64) -> EmbedderSpec:
    return EmbedderSpec("convnet4", tuple(input_shape), width=width)


def mlp(input_dim: int, hidden=(), output_dim: int | None = None) -> EmbedderSpec:
    return EmbedderSpec("mlp", (input_dim,), hidden=tuple(hidden), mlp_output_dim=output_dim or input_dim)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.gen.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(spec: EmbedderSpec, rng, dtype=np.float32) -> ParamSet:
    """Glorot-uniform weights, zero biases, unit batchnorm scale and zero shift."""
    params: ParamSet = {}
    if spec.kind == "convnet4":
        c_in = spec.input_shape[0]
        for i in range(N_BLOCKS):
            w = _glorot(rng, (spec.width, c_in, 3, 3), c_in * 9, spec.width * 9, dtype)
            params[f"block{i}.conv.weight"] = w
            params[f"block{i}.conv.bias"] = np.zeros(spec.width, dtype)
            params[f"block{i}.bn.weight"] = np.ones(spec.width, dtype)
            params[f"block{i}.bn.bias"] = np.zeros(spec.width, dtype)
            c_in = spec.width
    else:
        sizes = [spec.input_shape[0], *spec.hidden, spec.output_dim]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"layer{i}.weight"] = _glorot(rng, (a, b), a, b, dtype)
            params[f"layer{i}.bias"] = np.zeros(b, dtype)
    return params


def param_count(spec: EmbedderSpec) -> int:
    if spec.kind == "convnet4":
        total, c_in = 0, spec.input_shape[0]
        for _ in range(N_BLOCKS):
            total += spec.width * c_in * 9 + 3 * spec.width
            c_in = spec.width
        return total
    sizes = [spec.input_shape[0], *spec.hidden, spec.output_dim]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def bind_params(graph: Graph, params: ParamSet) -> dict[str, int]:
    """Register every parameter as a graph leaf; returns name -> node id."""
    return {name: graph.param(value, name) for name, value in params.items()}


def embed(spec: EmbedderSpec, nodes: dict[str, int], batch: int, graph: Graph) -> int:
    """Build f(batch) on ``graph``; ``nodes`` maps parameter names to bound node ids.

    Returns the node id of the [B, M] embedding matrix.
    """
    x = graph.value(batch)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"batch shape {x.shape} does not match input shape {list(spec.input_shape)}")
    if spec.kind == "convnet4":
        if x.shape[0] < 2:
            raise BatchTooSmall("batchnorm needs at least 2 examples in the batch")
        h = batch
        for i in range(N_BLOCKS):
            h = graph.conv2d(h, nodes[f"block{i}.conv.weight"], nodes[f"block{i}.conv.bias"])
            h = graph.batchnorm2d(h, nodes[f"block{i}.bn.weight"], nodes[f"block{i}.bn.bias"])
            h = graph.maxpool2x2(graph.relu(h))
        return graph.flatten(h)
    n_layers = len(spec.hidden) + 1
    h = batch
    for i in range(n_layers):
        h = graph.add(graph.matmul(h, nodes[f"layer{i}.weight"]), nodes[f"layer{i}.bias"])
        if i < n_layers - 1:
            h = graph.relu(h)
    return h


def flatten_params(params: ParamSet) -> np.ndarray:
    names = sorted(params)
    if not names:
        return np.zeros(0)
    return np.concatenate([np.asarray(params[n]).ravel() for n in names])


def unflatten_params(vector: np.ndarray, like: ParamSet) -> ParamSet:
    """Inverse of :func:`flatten_params`; shapes and dtypes come from ``like``."""
    vector = np.asarray(vector)
    total = sum(np.asarray(v).size for v in like.values())
    if vector.ndim != 1 or vector.size != total:
        raise LengthMismatch(f"vector of length {vector.size} cannot fill {total} parameters")
    out, pos = {}, 0
    for name in sorted(like):
        ref = np.asarray(like[name])
        out[name] = vector[pos : pos + ref.size].reshape(ref.shape).astype(ref.dtype, copy=True)
        pos += ref.size
    return {name: out[name] for name in like}
