"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is a static, topologically ordered list of primitive nodes.
Values are plain ``numpy.ndarray`` objects of dtype float64; the graph never
stores them, so one graph can be evaluated against many bindings.

    g = Graph()
    x = g.input("x", (3,))
    loss = g.sum(g.mul(x, x))
    values = forward(g, {x: np.array([1.0, 2.0, 3.0])})
    grads = backward(g, values, loss)
    grads.input_grads[x]  # -> [2, 4, 6]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

Tensor = np.ndarray


class GraphError(ValueError):
    """Raised for malformed graphs, bad bindings, or non-finite values."""

    def __init__(self, node: int | None, message: str):
        self.node = node
        prefix = f"node {node}: " if node is not None else ""
        super().__init__(prefix + message)


def as_tensor(value: Any) -> Tensor:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    if not np.all(np.isfinite(arr)):
        raise GraphError(None, "tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    name: str | None = None


LEAF_OPS = ("input", "param", "const")


class Graph:
    """Append-only computation graph; every builder method returns a node id."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _add(self, op, inputs=(), name=None, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(len(self.nodes), f"input {i} does not precede this node")
        self.nodes.append(Node(op, tuple(inputs), attrs, name))
        return len(self.nodes) - 1

    # leaves
    def input(self, name: str, shape=None) -> int:
        return self._add("input", name=name, shape=None if shape is None else tuple(shape))

    def param(self, name: str, shape=None) -> int:
        return self._add("param", name=name, shape=None if shape is None else tuple(shape))

    def const(self, value, name=None) -> int:
        return self._add("const", name=name, value=as_tensor(value))

    # structural
    def identity(self, a):
        return self._add("identity", (a,))

    def reshape(self, a, shape):
        return self._add("reshape", (a,), shape=tuple(shape))

    def transpose(self, a):
        return self._add("transpose", (a,))

    def patch_gather(self, image, radius: int):
        """C x H x W image -> (H*W) x (C*(2r+1)^2) patch matrix, edge-replicated."""
        return self._add("patch_gather", (image,), radius=int(radius))

    def pick(self, a, index):
        """Row-wise selection ``out[k] = a[k, index[k]]`` for a 2-D node."""
        return self._add("pick", (a,), index=np.asarray(index, dtype=np.int64))

    # affine / elementwise
    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def affine(self, x, w, b):
        return self.add(self.matmul(x, w), b)

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def div(self, a, b):
        return self._add("div", (a, b))

    def scale(self, a, c: float):
        return self._add("scale", (a,), c=float(c))

    def add_scalar(self, a, c: float):
        return self._add("add_scalar", (a,), c=float(c))

    def neg(self, a):
        return self.scale(a, -1.0)

    def tanh(self, a):
        return self._add("tanh", (a,))

    def relu(self, a):
        return self._add("relu", (a,))

    def sigmoid(self, a):
        return self._add("sigmoid", (a,))

    def exp(self, a):
        return self._add("exp", (a,))

    def log(self, a, floor: float = 0.0):
        """Natural log of ``max(a, floor)``; zero gradient where the floor is active."""
        return self._add("log", (a,), floor=float(floor))

    # softmax family (last axis)
    def softmax(self, a):
        return self._add("softmax", (a,))

    def log_softmax(self, a):
        return self._add("log_softmax", (a,))

    # reductions
    def sum(self, a, axis=None):
        return self._add("sum", (a,), axis=axis)

    def mean(self, a, axis=None):
        return self._add("mean", (a,), axis=axis)

    def masked_mean(self, a, mask):
        """Mean of ``a`` over entries where ``mask`` is true; 0 for an empty mask."""
        return self._add("masked_mean", (a,), mask=np.asarray(mask, dtype=bool))

    def fork(self) -> "Graph":
        """Copy that shares the existing nodes and can be extended independently."""
        g = Graph()
        g.nodes = list(self.nodes)
        return g

    def leaves(self, kind: str) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == kind]

    def find(self, name: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)


@dataclass
class GradientBundle:
    parameter_grads: dict[int, Tensor]
    input_grads: dict[int, Tensor]

    def __getitem__(self, node: int) -> Tensor:
        if node in self.parameter_grads:
            return self.parameter_grads[node]
        return self.input_grads[node]


# --------------------------------------------------------------------------
# primitives: forward(vals, attrs) and vjp(g, vals, out, attrs) -> grads

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(node, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(node, f"cannot broadcast {a.shape} with {b.shape}") from None


_patch_index_cache: dict[tuple, np.ndarray] = {}


def patch_indices(channels: int, height: int, width: int, radius: int) -> np.ndarray:
    """Flat indices into a C x H x W array for every pixel's patch.

    Row ``h*W + w`` holds the patch of pixel (h, w), ordered channel-major
    then row offset then column offset. Out-of-range offsets are clamped to
    the border (edge replication).
    """
    key = (channels, height, width, radius)
    idx = _patch_index_cache.get(key)
    if idx is None:
        offs = np.arange(-radius, radius + 1)
        hh = np.clip(np.arange(height)[:, None] + offs[None, :], 0, height - 1)
        ww = np.clip(np.arange(width)[:, None] + offs[None, :], 0, width - 1)
        # (H, W, C, dy, dx)
        idx = (np.arange(channels)[None, None, :, None, None] * (height * width)
               + hh[:, None, None, :, None] * width
               + ww[None, :, None, None, :])
        idx = idx.reshape(height * width, channels * len(offs) ** 2)
        idx.setflags(write=False)
        _patch_index_cache[key] = idx
    return idx


def _fwd_patch_gather(node, vals, attrs):
    (x,) = vals
    if x.ndim != 3:
        raise GraphError(node, f"patch_gather expects C x H x W, got {x.shape}")
    return x.ravel()[patch_indices(*x.shape, attrs["radius"])]


def _vjp_patch_gather(g, vals, out, attrs):
    (x,) = vals
    idx = patch_indices(*x.shape, attrs["radius"])
    flat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=x.size)
    return (flat.reshape(x.shape),)


def _fwd_matmul(node, vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(node, f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _fwd_pick(node, vals, attrs):
    (a,) = vals
    index = attrs["index"]
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise GraphError(node, f"pick expects 2-D input and one index per row, got {a.shape}, {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise GraphError(node, "pick index out of range")
    return a[np.arange(a.shape[0]), index]


def _vjp_pick(g, vals, out, attrs):
    (a,) = vals
    grad = np.zeros_like(a)
    grad[np.arange(a.shape[0]), attrs["index"]] = g
    return (grad,)


def _binary(fn):
    def fwd(node, vals, attrs):
        a, b = vals
        _broadcast_shape(node, a, b)
        return fn(a, b)
    return fwd


def _fwd_softmax(node, vals, attrs):
    (a,) = vals
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _vjp_softmax(g, vals, out, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _fwd_log_softmax(node, vals, attrs):
    (a,) = vals
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _vjp_log_softmax(g, vals, out, attrs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _fwd_masked_mean(node, vals, attrs):
    (a,) = vals
    mask = attrs["mask"]
    if mask.shape != a.shape:
        raise GraphError(node, f"mask shape {mask.shape} != value shape {a.shape}")
    count = int(mask.sum())
    if count == 0:
        return np.float64(0.0)
    return np.float64(a[mask].sum() / count)


def _vjp_masked_mean(g, vals, out, attrs):
    (a,) = vals
    mask = attrs["mask"]
    count = int(mask.sum())
    if count == 0:
        return (np.zeros_like(a),)
    return (np.where(mask, g / count, 0.0),)


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _fwd_log(node, vals, attrs):
    (a,) = vals
    floor = attrs["floor"]
    if floor > 0:
        a = np.maximum(a, floor)
    elif np.any(a <= 0):
        raise GraphError(node, "log of non-positive value")
    return np.log(a)


def _vjp_log(g, vals, out, attrs):
    (a,) = vals
    floor = attrs["floor"]
    if floor > 0:
        return (np.where(a > floor, g / np.maximum(a, floor), 0.0),)
    return (g / a,)


def _fwd_reshape(node, vals, attrs):
    (a,) = vals
    if int(np.prod(attrs["shape"], dtype=np.int64)) != a.size:
        raise GraphError(node, f"cannot reshape {a.shape} to {attrs['shape']}")
    return a.reshape(attrs["shape"])


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda n, v, a: v[0], lambda g, v, o, a: (g,)),
    "reshape": (_fwd_reshape, lambda g, v, o, a: (g.reshape(v[0].shape),)),
    "transpose": (lambda n, v, a: v[0].T, lambda g, v, o, a: (g.T,)),
    "patch_gather": (_fwd_patch_gather, _vjp_patch_gather),
    "pick": (_fwd_pick, _vjp_pick),
    "matmul": (_fwd_matmul, lambda g, v, o, a: (g @ v[1].T, v[0].T @ g)),
    "add": (_binary(np.add), lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (_binary(np.subtract), lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (_binary(np.multiply),
            lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape))),
    "div": (_binary(np.divide),
            lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape), _unbroadcast(-g * o / v[1], v[1].shape))),
    "scale": (lambda n, v, a: v[0] * a["c"], lambda g, v, o, a: (g * a["c"],)),
    "add_scalar": (lambda n, v, a: v[0] + a["c"], lambda g, v, o, a: (g,)),
    "tanh": (lambda n, v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "relu": (lambda n, v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (np.where(v[0] > 0, g, 0.0),)),
    "sigmoid": (lambda n, v, a: 0.5 * (1.0 + np.tanh(0.5 * v[0])), lambda g, v, o, a: (g * o * (1.0 - o),)),
    "exp": (lambda n, v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "log": (_fwd_log, _vjp_log),
    "softmax": (_fwd_softmax, _vjp_softmax),
    "log_softmax": (_fwd_log_softmax, _vjp_log_softmax),
    "sum": (lambda n, v, a: np.asarray(v[0].sum(axis=a["axis"])),
            lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a["axis"]).copy(),)),
    "mean": (lambda n, v, a: np.asarray(v[0].mean(axis=a["axis"])),
             lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a["axis"])
                                 * (np.asarray(o).size / v[0].size),)),
    "masked_mean": (_fwd_masked_mean, _vjp_masked_mean),
}


def forward(graph: Graph, bindings: Mapping[int, Any], check_finite: bool = True,
            prefix: list[Tensor] | None = None) -> list[Tensor]:
    """Evaluate every node. Returns a list indexed by node id.

    ``prefix`` holds already computed values for the first nodes (e.g. from a
    graph this one was forked from); only the remaining nodes are evaluated.
    """
    values: list[Tensor] = list(prefix) if prefix is not None else []
    for i, node in enumerate(graph.nodes[len(values):], start=len(values)):
        if node.op in ("input", "param"):
            if i not in bindings:
                raise GraphError(i, f"unbound {node.op} '{node.name}'")
            val = np.asarray(bindings[i], dtype=np.float64)
            shape = node.attrs.get("shape")
            if shape is not None and val.shape != shape:
                raise GraphError(i, f"bound shape {val.shape} != declared {shape}")
        elif node.op == "const":
            val = node.attrs["value"]
        else:
            fwd, _ = PRIMITIVES[node.op]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):  # reported below instead
                val = np.asarray(fwd(i, [values[j] for j in node.inputs], node.attrs), dtype=np.float64)
        if check_finite and not np.all(np.isfinite(val)):
            raise GraphError(i, f"non-finite value produced by '{node.op}'")
        values.append(val)
    return values


def backward(graph: Graph, values: list[Tensor], loss: int) -> GradientBundle:
    """Exact reverse-mode gradients of the scalar ``loss`` node."""
    if len(values) != len(graph.nodes):
        raise GraphError(None, "forward values do not match the graph")
    if values[loss].size != 1:
        raise GraphError(loss, f"loss node is not scalar (shape {values[loss].shape})")

    grads: list[Tensor | None] = [None] * (loss + 1)
    grads[loss] = np.ones_like(values[loss])
    for i in range(loss, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.op in LEAF_OPS:
            continue
        _, vjp = PRIMITIVES[node.op]
        in_vals = [values[j] for j in node.inputs]
        for j, gj in zip(node.inputs, vjp(g, in_vals, values[i], node.attrs)):
            gj = np.asarray(gj, dtype=np.float64)
            grads[j] = gj if grads[j] is None else grads[j] + gj

    params, inputs = {}, {}
    for i, node in enumerate(graph.nodes[: loss + 1]):
        if node.op == "param":
            params[i] = grads[i] if grads[i] is not None else np.zeros_like(values[i])
        elif node.op == "input":
            inputs[i] = grads[i] if grads[i] is not None else np.zeros_like(values[i])
    for i, node in enumerate(graph.nodes[loss + 1:], start=loss + 1):
        if node.op == "param":
            params[i] = np.zeros_like(values[i])
        elif node.op == "input":
            inputs[i] = np.zeros_like(values[i])
    return GradientBundle(params, inputs)


def value_and_grad(graph: Graph, bindings: Mapping[int, Any], loss: int) -> tuple[float, GradientBundle]:
    values = forward(graph, bindings)
    return float(values[loss]), backward(graph, values, loss)


def grad_check(graph: Graph, bindings: Mapping[int, Any], epsilon: float = 1e-5,
               loss: int | None = None, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is ``|ad - fd| / max(1, |fd|)``. Every input and
    parameter coordinate is checked unless ``max_coords`` is given, in which
    case a seeded subsample of that size is drawn per leaf.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    if loss is None:
        loss = len(graph.nodes) - 1
    bindings = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    grads = backward(graph, forward(graph, bindings), loss)
    rng = np.random.default_rng(seed)

    def loss_at(leaf, flat_idx, delta):
        perturbed = dict(bindings)
        arr = bindings[leaf].copy()
        arr.flat[flat_idx] += delta
        perturbed[leaf] = arr
        return float(forward(graph, perturbed)[loss])

    worst = 0.0
    for leaf in sorted({**grads.parameter_grads, **grads.input_grads}):
        ad = grads[leaf]
        coords = np.arange(ad.size)
        if max_coords is not None and ad.size > max_coords:
            coords = np.sort(rng.choice(ad.size, size=max_coords, replace=False))
        for k in coords:
            fd = (loss_at(leaf, k, epsilon) - loss_at(leaf, k, -epsilon)) / (2 * epsilon)
            worst = max(worst, abs(ad.flat[k] - fd) / max(1.0, abs(fd)))
    return worst
