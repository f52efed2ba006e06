"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Graph` is an append-only tape. Leaves are either parameters
(which receive gradients) or constants. Every other node records the op
kind, its input node ids, its attributes and its output value, which is
enough to both differentiate the tape and replay it with substituted
leaf values (used by :func:`check_gradients`).

The op catalog is fixed to what the few-shot embeddings and loss need:

=============================  ==============================================
op                             shape rule
=============================  ==============================================
matmul(a, b)                   [n, k] x [k, m] -> [n, m]
add(a, b)                      b.shape must be a suffix of a.shape
conv2d(x, w, b)                [B, C, H, W], [F, C, 3, 3], [F] -> [B, F, H, W]
batchnorm2d(x, gamma, beta)    [B, C, H, W], [C], [C] -> [B, C, H, W]
relu(x)                        elementwise
maxpool2x2(x)                  [B, C, H, W] -> [B, C, H // 2, W // 2]
flatten(x; start_axis=1)       merges axes start_axis.. into one
mean(x; axis=None)             reduces one axis, or all axes to a scalar
log_softmax(x)                 along the last axis
negate(x), scalar_mul(x; c)    elementwise
gather_rows(x; indices)        x[indices] along axis 0
sq_euclidean_pairwise(a, b)    [N, M], [K, M] -> [N, K]
cosine_similarity_pairwise     [N, M], [K, M] -> [N, K]
=============================  ==============================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import (
    InvalidArgument,
    NonFiniteInput,
    NonScalarLoss,
    ShapeMismatch,
    ZeroVectorCosine,
)

BN_EPS = 1e-5


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: np.ndarray
    requires_grad: bool
    ctx: Any = None


@dataclass
class _OpDef:
    forward: Callable
    backward: Callable
    arity: int


_OPS: dict[str, _OpDef] = {}


def _register(name, arity):
    def wrap(cls):
        _OPS[name] = _OpDef(cls.forward, cls.backward, arity)
        return cls

    return wrap


def _need(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


# ---------------------------------------------------------------------------
# op kernels: forward(xs, attrs) -> (out, ctx); backward(g, xs, out, ctx, attrs)
# ---------------------------------------------------------------------------


@_register("matmul", 2)
class _MatMul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _need(a.ndim == 2 and b.ndim == 2, f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        _need(a.shape[1] == b.shape[0], f"matmul inner dims differ: {a.shape} x {b.shape}")
        return a @ b, None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        a, b = xs
        return g @ b.T, a.T @ g


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _need(
            b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape,
            f"add: {b.shape} does not broadcast over leading axes of {a.shape}",
        )
        return a + b, None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        a, b = xs
        lead = tuple(range(a.ndim - b.ndim))
        gb = g.sum(axis=lead) if lead else g
        return g, gb


@_register("conv2d", 3)
class _Conv2d:
    # 3x3 kernel, stride 1, zero padding 1
    @staticmethod
    def forward(xs, attrs):
        x, w, b = xs
        _need(x.ndim == 4, f"conv2d input must be [B, C, H, W], got {x.shape}")
        _need(
            w.ndim == 4 and w.shape[2:] == (3, 3) and w.shape[1] == x.shape[1],
            f"conv2d weight {w.shape} incompatible with input {x.shape}",
        )
        _need(b.shape == (w.shape[0],), f"conv2d bias {b.shape} != ({w.shape[0]},)")
        xpad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(2, 3))
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, H, W, F]
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(out), cols

    @staticmethod
    def backward(g, xs, out, cols, attrs):
        x, w, b = xs
        H, W = x.shape[2:]
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # [F, C, 3, 3]
        gxpad = np.zeros((x.shape[0], x.shape[1], H + 2, W + 2), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # [B, H, W, C]
                gxpad[:, :, i : i + H, j : j + W] += contrib.transpose(0, 3, 1, 2)
        return gxpad[:, :, 1:-1, 1:-1], gw, g.sum(axis=(0, 2, 3))


@_register("batchnorm2d", 3)
class _BatchNorm2d:
    @staticmethod
    def forward(xs, attrs):
        x, gamma, beta = xs
        _need(x.ndim == 4, f"batchnorm2d input must be [B, C, H, W], got {x.shape}")
        C = x.shape[1]
        _need(gamma.shape == (C,) and beta.shape == (C,), f"batchnorm2d affine shapes must be ({C},)")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
        xhat = xc * inv_std
        out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        return out, (xhat, inv_std)

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        x, gamma, beta = xs
        xhat, inv_std = ctx
        n = x.shape[0] * x.shape[2] * x.shape[3]
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma[None, :, None, None]
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv_std / n) * (n * gxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta


@_register("relu", 1)
class _Relu:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        return np.maximum(x, 0), None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        (x,) = xs
        return (g * (x > 0),)


@_register("maxpool2x2", 1)
class _MaxPool:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        _need(x.ndim == 4 and x.shape[2] >= 2 and x.shape[3] >= 2, f"maxpool2x2 needs [B, C, H>=2, W>=2], got {x.shape}")
        B, C, H, W = x.shape
        h, w = H // 2, W // 2
        win = x[:, :, : 2 * h, : 2 * w].reshape(B, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h, w, 4)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return out, arg

    @staticmethod
    def backward(g, xs, out, arg, attrs):
        (x,) = xs
        B, C, H, W = x.shape
        h, w = H // 2, W // 2
        win = np.zeros((B, C, h, w, 4), dtype=g.dtype)
        np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x)
        gx[:, :, : 2 * h, : 2 * w] = win.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)
        return (gx,)


@_register("flatten", 1)
class _Flatten:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        start = attrs.get("start_axis", 1)
        _need(0 <= start < max(x.ndim, 1), f"flatten start_axis {start} invalid for shape {x.shape}")
        return x.reshape(x.shape[:start] + (-1,)), None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        return (g.reshape(xs[0].shape),)


@_register("mean", 1)
class _Mean:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        axis = attrs.get("axis")
        if axis is not None:
            _need(-x.ndim <= axis < x.ndim, f"mean axis {axis} out of range for {x.shape}")
        return np.asarray(x.mean(axis=axis)), None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        (x,) = xs
        axis = attrs.get("axis")
        if axis is None:
            return (np.full_like(x, g / x.size),)
        n = x.shape[axis]
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)


@_register("log_softmax", 1)
class _LogSoftmax:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        _need(x.ndim >= 1, "log_softmax needs at least one axis")
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return out, None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


@_register("negate", 1)
class _Negate:
    @staticmethod
    def forward(xs, attrs):
        return -xs[0], None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        return (-g,)


@_register("scalar_mul", 1)
class _ScalarMul:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        return x * x.dtype.type(attrs["c"]), None

    @staticmethod
    def backward(g, xs, out, ctx, attrs):
        return (g * g.dtype.type(attrs["c"]),)


@_register("gather_rows", 1)
class _GatherRows:
    @staticmethod
    def forward(xs, attrs):
        (x,) = xs
        idx = np.asarray(attrs["indices"], dtype=np.intp)
        _need(x.ndim >= 1 and idx.ndim == 1, "gather_rows needs x with >= 1 axis and a 1-D index list")
        _need(idx.size == 0 or (idx.min() >= -x.shape[0] and idx.max() < x.shape[0]), "gather_rows index out of range")
        return x[idx], idx

    @staticmethod
    def backward(g, xs, out, idx, attrs):
        gx = np.zeros_like(xs[0])
        np.add.at(gx, idx, g)
        return (gx,)


def _check_pairwise(a, b, name):
    _need(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1], f"{name} expects [N, M] and [K, M], got {a.shape}, {b.shape}")


@_register("sq_euclidean_pairwise", 2)
class _SqEuclid:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _check_pairwise(a, b, "sq_euclidean_pairwise")
        diff = a[:, None, :] - b[None, :, :]
        return (diff * diff).sum(axis=-1), diff

    @staticmethod
    def backward(g, xs, out, diff, attrs):
        gd = 2 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)


@_register("cosine_similarity_pairwise", 2)
class _Cosine:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        _check_pairwise(a, b, "cosine_similarity_pairwise")
        na = np.sqrt((a * a).sum(axis=1))
        nb = np.sqrt((b * b).sum(axis=1))
        if not (np.all(na > 0) and np.all(nb > 0)):
            raise ZeroVectorCosine("cosine similarity is undefined for zero vectors")
        an = a / na[:, None]
        bn = b / nb[:, None]
        return an @ bn.T, (an, bn, na, nb)

    @staticmethod
    def backward(g, xs, c, ctx, attrs):
        an, bn, na, nb = ctx
        gc = g * c
        ga = (g @ bn - gc.sum(axis=1)[:, None] * an) / na[:, None]
        gb = (g.T @ an - gc.sum(axis=0)[:, None] * bn) / nb[:, None]
        return ga, gb


OP_KINDS = tuple(_OPS)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Append-only computation tape at a fixed float precision."""

    dtype: Any = np.float32
    nodes: list[Node] = field(default_factory=list)
    params: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        if self.dtype not in (np.float32, np.float64):
            raise InvalidArgument(f"unsupported precision {self.dtype}")

    def _leaf(self, value, is_param):
        arr = np.array(value, dtype=self.dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("NaN or Inf in graph input")
        self.nodes.append(Node("leaf", (), {}, arr, is_param))
        return len(self.nodes) - 1

    def param(self, value, name: str) -> int:
        nid = self._leaf(value, True)
        self.params[nid] = name
        return nid

    def constant(self, value) -> int:
        return self._leaf(value, False)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        return forward(self, op, inputs, **attrs)

    # convenience wrappers, one per op kind
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def conv2d(self, x, w, b):
        return self.apply("conv2d", x, w, b)

    def batchnorm2d(self, x, gamma, beta):
        return self.apply("batchnorm2d", x, gamma, beta)

    def relu(self, x):
        return self.apply("relu", x)

    def maxpool2x2(self, x):
        return self.apply("maxpool2x2", x)

    def flatten(self, x, start_axis=1):
        return self.apply("flatten", x, start_axis=start_axis)

    def mean(self, x, axis=None):
        return self.apply("mean", x, axis=axis)

    def log_softmax(self, x):
        return self.apply("log_softmax", x)

    def negate(self, x):
        return self.apply("negate", x)

    def scalar_mul(self, x, c):
        return self.apply("scalar_mul", x, c=float(c))

    def gather_rows(self, x, indices):
        return self.apply("gather_rows", x, indices=tuple(int(i) for i in indices))

    def sq_euclidean_pairwise(self, a, b):
        return self.apply("sq_euclidean_pairwise", a, b)

    def cosine_similarity_pairwise(self, a, b):
        return self.apply("cosine_similarity_pairwise", a, b)

    def replay(self, overrides: dict[int, np.ndarray]) -> list[np.ndarray]:
        """Re-evaluate every node with some leaf values substituted."""
        values: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                values.append(np.asarray(overrides.get(nid, node.value), dtype=self.dtype))
            else:
                out, _ = _OPS[node.op].forward([values[i] for i in node.inputs], node.attrs)
                values.append(np.asarray(out, dtype=self.dtype))
        return values


def forward(graph: Graph, op: str, inputs, **attrs) -> int:
    """Append ``op(inputs)`` to the graph and return the new node id."""
    if op not in _OPS:
        raise InvalidArgument(f"unknown op kind {op!r}")
    spec = _OPS[op]
    inputs = tuple(int(i) for i in inputs)
    if len(inputs) != spec.arity:
        raise ShapeMismatch(f"{op} takes {spec.arity} inputs, got {len(inputs)}")
    n = len(graph.nodes)
    if any(i < 0 or i >= n for i in inputs):
        raise InvalidArgument(f"{op}: input ids must refer to existing nodes")
    xs = [graph.nodes[i].value for i in inputs]
    out, ctx = spec.forward(xs, attrs)
    out = np.asarray(out, dtype=graph.dtype)
    req = any(graph.nodes[i].requires_grad for i in inputs)
    graph.nodes.append(Node(op, inputs, attrs, out, req, ctx))
    return n


def backward(graph: Graph, loss: int) -> dict[int, np.ndarray]:
    """Gradient of the scalar ``loss`` node with respect to every parameter node."""
    lv = graph.nodes[loss].value
    if lv.size != 1:
        raise NonScalarLoss(f"loss node has shape {lv.shape}")
    grads: dict[int, np.ndarray] = {loss: np.ones_like(lv)}
    for nid in range(loss, -1, -1):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or node.op == "leaf" or not node.requires_grad:
            continue
        xs = [graph.nodes[i].value for i in node.inputs]
        in_grads = _OPS[node.op].backward(g, xs, node.value, node.ctx, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if not graph.nodes[i].requires_grad:
                continue
            gi = np.asarray(gi, dtype=graph.dtype)
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return {pid: grads.get(pid, np.zeros_like(graph.nodes[pid].value)) for pid in graph.params}


def check_gradients(graph: Graph, loss: int, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    The error for one coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``max_coords`` set, that many coordinates are drawn (seeded) from the
    flattened parameter space instead of visiting every one.
    """
    analytic = backward(graph, loss)
    pids = sorted(graph.params)
    sizes = [graph.nodes[p].value.size for p in pids]
    total = int(sum(sizes))
    if max_coords is None or max_coords >= total:
        coords = np.arange(total)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(total, size=max_coords, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for c in coords:
        k = int(np.searchsorted(offsets, c, side="right") - 1)
        pid, j = pids[k], int(c - offsets[k])
        base = graph.nodes[pid].value
        plus = base.copy()
        plus.flat[j] += h
        minus = base.copy()
        minus.flat[j] -= h
        fp = float(graph.replay({pid: plus})[loss].reshape(()))
        fm = float(graph.replay({pid: minus})[loss].reshape(()))
        numeric = (fp - fm) / (float(plus.flat[j]) - float(minus.flat[j]))
        a = float(analytic[pid].flat[j])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
