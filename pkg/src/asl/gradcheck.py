"""Finite-difference regression suite over every gradcore primitive.

Each primitive gets a family of small random graphs (inputs drawn from
[-2, 2]) reduced to a scalar by a random linear functional, then checked
with :func:`asl.gradcore.grad_check`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import gradcore
from .gradcore import Graph

log = logging.getLogger(__name__)

TOLERANCE = 1e-4


def _reduce(g: Graph, node: int, shape, rng) -> int:
    weights = g.const(rng.uniform(-1, 1, size=shape))
    return g.sum(g.mul(node, weights))


def _positive(g: Graph, x: int) -> int:
    # 1 + x^2 keeps log/div arguments away from zero
    return g.add_scalar(g.mul(x, x), 1.0)


def _case_unary(op):
    def build(rng):
        g = Graph()
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        x = g.input("x", shape)
        arg = _positive(g, x) if op == "log" else x
        y = getattr(g, op)(arg)
        loss = _reduce(g, y, shape, rng)
        return g, {x: rng.uniform(-2, 2, size=shape)}, loss
    return build


def _case_binary(op):
    def build(rng):
        g = Graph()
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        bshape = shape if rng.random() < 0.5 else (1, shape[1])
        a = g.input("a", shape)
        b = g.param("b", bshape)
        rhs = _positive(g, b) if op == "div" else b
        y = getattr(g, op)(a, rhs)
        loss = _reduce(g, y, shape, rng)
        return g, {a: rng.uniform(-2, 2, size=shape), b: rng.uniform(-2, 2, size=bshape)}, loss
    return build


def _case_scalar(op):
    def build(rng):
        g = Graph()
        shape = (int(rng.integers(1, 5)),)
        x = g.input("x", shape)
        y = getattr(g, op)(x, float(rng.uniform(-2, 2)))
        return g, {x: rng.uniform(-2, 2, size=shape)}, _reduce(g, y, shape, rng)
    return build


def _case_matmul(rng):
    g = Graph()
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    x = g.input("x", (m, k))
    w = g.param("w", (k, n))
    b = g.param("b", (1, n))
    y = g.tanh(g.affine(x, w, b))
    loss = _reduce(g, y, (m, n), rng)
    return g, {x: rng.uniform(-2, 2, (m, k)), w: rng.uniform(-2, 2, (k, n)), b: rng.uniform(-2, 2, (1, n))}, loss


def _case_softmax(op):
    def build(rng):
        g = Graph()
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        x = g.input("x", shape)
        y = getattr(g, op)(x)
        return g, {x: rng.uniform(-2, 2, size=shape)}, _reduce(g, y, shape, rng)
    return build


def _case_reduce(op):
    def build(rng):
        g = Graph()
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        x = g.input("x", shape)
        y = getattr(g, op)(g.tanh(x), axis=axis)
        out_shape = () if axis is None else tuple(d for i, d in enumerate(shape) if i != axis)
        loss = _reduce(g, y, out_shape, rng)
        return g, {x: rng.uniform(-2, 2, size=shape)}, loss
    return build


def _case_masked_mean(rng):
    g = Graph()
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    mask = rng.random(shape) < 0.5
    x = g.input("x", shape)
    loss = g.masked_mean(g.mul(g.tanh(x), x), mask)
    return g, {x: rng.uniform(-2, 2, size=shape)}, loss


def _case_patch_gather(rng):
    g = Graph()
    c, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    r = int(rng.integers(0, 3))
    x = g.input("x", (c, h, w))
    p = g.patch_gather(x, r)
    shape = (h * w, c * (2 * r + 1) ** 2)
    return g, {x: rng.uniform(-2, 2, (c, h, w))}, _reduce(g, g.tanh(p), shape, rng)


def _case_pick(rng):
    g = Graph()
    m, n = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    x = g.input("x", (m, n))
    idx = rng.integers(0, n, size=m)
    loss = g.mean(g.pick(g.log_softmax(x), idx))
    return g, {x: rng.uniform(-2, 2, (m, n))}, loss


def _case_structural(op):
    def build(rng):
        g = Graph()
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = g.input("x", (m, n))
        if op == "reshape":
            y, shape = g.reshape(x, (n * m,)), (n * m,)
        elif op == "transpose":
            y, shape = g.transpose(x), (n, m)
        else:
            y, shape = g.identity(x), (m, n)
        return g, {x: rng.uniform(-2, 2, (m, n))}, _reduce(g, y, shape, rng)
    return build


CASES = {
    "identity": _case_structural("identity"),
    "reshape": _case_structural("reshape"),
    "transpose": _case_structural("transpose"),
    "patch_gather": _case_patch_gather,
    "pick": _case_pick,
    "matmul": _case_matmul,
    "add": _case_binary("add"),
    "sub": _case_binary("sub"),
    "mul": _case_binary("mul"),
    "div": _case_binary("div"),
    "scale": _case_scalar("scale"),
    "add_scalar": _case_scalar("add_scalar"),
    "tanh": _case_unary("tanh"),
    "relu": _case_unary("relu"),
    "sigmoid": _case_unary("sigmoid"),
    "exp": _case_unary("exp"),
    "log": _case_unary("log"),
    "softmax": _case_softmax("softmax"),
    "log_softmax": _case_softmax("log_softmax"),
    "sum": _case_reduce("sum"),
    "mean": _case_reduce("mean"),
    "masked_mean": _case_masked_mean,
}


@dataclass
class GradcheckReport:
    per_primitive: dict[str, float] = field(default_factory=dict)
    graphs: int = 0
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.per_primitive.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def run_suite(primitives=None, graphs_per_primitive: int = 6, epsilon: float = 1e-5,
              seed: int = 0) -> GradcheckReport:
    """Check every primitive (or the given subset) on random graphs."""
    names = list(CASES) if primitives is None else list(primitives)
    if not names:
        log.warning("gradcheck: empty primitive list, nothing to check")
    report = GradcheckReport()
    start = time.perf_counter()
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(graphs_per_primitive):
            graph, bindings, loss = CASES[name](rng)
            if name == "relu":
                # keep probes off the kink
                for key, val in bindings.items():
                    bindings[key] = np.where(np.abs(val) < 10 * epsilon, 0.5, val)
            worst = max(worst, gradcore.grad_check(graph, bindings, epsilon, loss=loss))
            report.graphs += 1
        report.per_primitive[name] = worst
    report.seconds = time.perf_counter() - start
    return report
