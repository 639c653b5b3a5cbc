"""Small reverse-mode autodiff engine over numpy arrays.

A :class:`Graph` is built once from named roots (inputs and parameters) and a
fixed sequence of operations; it can then be run repeatedly with different
bindings.  Nodes may only reference nodes created before them, so creation
order is a valid topological order and the graph is acyclic by construction.

Tensors are plain ``numpy.ndarray`` values.  The default precision is
float32; ``forward(..., dtype=np.float64)`` runs the identical op sequence in
double precision, which is what the finite-difference oracle uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

# reductions larger than this accumulate in float64
_WIDE_SUM = 4096


class GraphError(Exception):
    """Base error for graph construction and evaluation."""


class ShapeError(GraphError, ValueError):
    pass


class UnboundRootError(GraphError, KeyError):
    def __str__(self):
        return self.args[0]


def as_tensor(value, dtype=np.float32) -> np.ndarray:
    """Convert to a contiguous array of ``dtype`` and reject non-finite data."""
    arr = np.ascontiguousarray(value, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _wide_sum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    n = x.size if axis is None else x.shape[axis]
    if n > _WIDE_SUM and x.dtype == np.float32:
        return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims).astype(np.float32)
    return np.sum(x, axis=axis, keepdims=keepdims)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label}>"


class Graph:
    """Static computation graph with cached forward values.

    Build with the op methods, each of which returns a :class:`Node`::

        g = Graph()
        x = g.input("x")
        y = g.sum(g.square(x))
        g.forward({"x": [1.0, 2.0, 3.0]}, y)
        g.grad(y, ["x"])["x"]   # -> [2., 4., 6.]
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.roots: dict[str, Node] = {}
        self._values: dict[int, np.ndarray] = {}
        self._dtype = np.float32

    # -- construction -----------------------------------------------------

    def _add(self, op, inputs=(), name=None, **attrs) -> Node:
        for n in inputs:
            if not isinstance(n, Node) or n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise GraphError(f"{op}: input {n!r} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), attrs, name)
        self.nodes.append(node)
        return node

    def input(self, name: str) -> Node:
        if name in self.roots:
            raise GraphError(f"duplicate root name {name!r}")
        node = self._add("input", name=name)
        self.roots[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        return self._add("const", name=name, value=np.asarray(value, dtype=np.float64))

    def add(self, a: Node, b: Node) -> Node:
        return self._add("add", (a, b))

    def subtract(self, a: Node, b: Node) -> Node:
        return self._add("sub", (a, b))

    def scale(self, a: Node, c: float) -> Node:
        return self._add("scale", (a,), c=float(c))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._add("matmul", (a, b))

    def relu(self, a: Node) -> Node:
        return self._add("relu", (a,))

    def l2_normalize(self, a: Node) -> Node:
        return self._add("l2norm", (a,))

    def softmax_cross_entropy(self, logits: Node, targets: Node) -> Node:
        """Mean over rows of ``-sum(targets * log_softmax(logits))``."""
        return self._add("softmax_ce", (logits, targets))

    def square(self, a: Node) -> Node:
        return self._add("square", (a,))

    def sum(self, a: Node, axis: int | None = None) -> Node:
        return self._add("sum", (a,), axis=axis)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        return self._add("mean", (a,), axis=axis)

    def quadratic_form(self, v: Node, m: Node) -> Node:
        """Row-wise ``v^T M v`` over the last axis of ``v``."""
        return self._add("quadform", (v, m))

    # -- evaluation -------------------------------------------------------

    def _ancestors(self, out: Node) -> list[int]:
        need = {out.id}
        for node in reversed(self.nodes[: out.id + 1]):
            if node.id in need:
                need.update(node.inputs)
        return sorted(need)

    def forward(self, bindings: Mapping[str, Any], output: Node | None = None,
                dtype=np.float32) -> np.ndarray:
        """Evaluate the graph up to ``output`` (default: the last node)."""
        if output is None:
            output = self.nodes[-1]
        self._values = {}
        self._dtype = dtype
        for nid in self._ancestors(output):
            node = self.nodes[nid]
            if node.op == "input":
                if node.name not in bindings:
                    raise UnboundRootError(f"root {node.name!r} is not bound")
                val = as_tensor(bindings[node.name], dtype)
            elif node.op == "const":
                val = node.attrs["value"].astype(dtype)
            else:
                args = [self._values[i] for i in node.inputs]
                val = _FORWARD[node.op](node, *args)
            self._values[nid] = val
        # bound roots off the output's path still get a value (their gradient is zero)
        for name, node in self.roots.items():
            if node.id not in self._values and name in bindings:
                self._values[node.id] = as_tensor(bindings[name], dtype)
        return self._values[output.id]

    def value(self, node: Node) -> np.ndarray:
        return self._values[node.id]

    def grad(self, output: Node, wrt: Iterable[str]) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of the scalar ``output`` w.r.t. named roots."""
        wrt = list(wrt)
        for name in wrt:
            if name not in self.roots:
                raise GraphError(f"root {name!r} is not in the graph")
        if output.id not in self._values:
            raise GraphError("forward must run before grad")
        out_val = self._values[output.id]
        if out_val.size != 1:
            raise GraphError(f"grad needs a scalar output, got shape {list(out_val.shape)}")

        # only propagate along paths that reach a requested root
        live = {self.roots[n].id for n in wrt}
        for node in self.nodes[: output.id + 1]:
            if any(i in live for i in node.inputs):
                live.add(node.id)

        grads: dict[int, np.ndarray] = {output.id: np.ones_like(out_val)}
        for node in reversed(self.nodes[: output.id + 1]):
            if node.op in ("input", "const"):
                continue
            g = grads.pop(node.id, None)
            if g is None:
                continue
            args = [self._values[i] for i in node.inputs]
            in_grads = _BACKWARD[node.op](node, g, self._values[node.id], *args)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or i not in live:
                    continue
                gi = gi.astype(self._dtype, copy=False)
                grads[i] = grads[i] + gi if i in grads else gi

        result = {}
        for name in wrt:
            rid = self.roots[name].id
            result[name] = grads.get(rid, np.zeros_like(self._values[rid]))
        return result


# -- op kernels -------------------------------------------------------------

def _check_broadcast(node, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{node.op}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None


def _f_add(node, a, b):
    _check_broadcast(node, a, b)
    return a + b


def _f_sub(node, a, b):
    _check_broadcast(node, a, b)
    return a - b


def _f_matmul(node, a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return a @ b


def _f_l2norm(node, a):
    norm = np.sqrt(_wide_sum(a * a, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    return np.where(norm > 0, a / safe, 0).astype(a.dtype)


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _f_softmax_ce(node, z, t):
    if z.ndim != 2 or z.shape != t.shape:
        raise ShapeError(f"softmax_ce: logits {list(z.shape)} and targets {list(t.shape)} differ")
    per_row = -(t * _log_softmax(z)).sum(axis=-1)
    return np.atleast_1d(per_row.mean()).astype(z.dtype)


def _f_reduce(node, a):
    axis = node.attrs["axis"]
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{node.op}: axis {axis} out of range for shape {list(a.shape)}")
    out = _wide_sum(a, axis=axis)
    if node.op == "mean":
        out = out / (a.size if axis is None else a.shape[axis])
    return np.atleast_1d(out).astype(a.dtype) if axis is None else out.astype(a.dtype)


def _f_quadform(node, v, m):
    d = v.shape[-1] if v.ndim else 0
    if v.ndim not in (1, 2) or m.shape != (d, d):
        raise ShapeError(f"quadform: vector shape {list(v.shape)} incompatible with matrix {list(m.shape)}")
    return np.sum(v * (v @ m), axis=-1)


_FORWARD = {
    "add": _f_add,
    "sub": _f_sub,
    "scale": lambda node, a: a * a.dtype.type(node.attrs["c"]),
    "matmul": _f_matmul,
    "relu": lambda node, a: np.maximum(a, 0),
    "l2norm": _f_l2norm,
    "softmax_ce": _f_softmax_ce,
    "square": lambda node, a: a * a,
    "sum": _f_reduce,
    "mean": _f_reduce,
    "quadform": _f_quadform,
}


def _b_matmul(node, g, out, a, b):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2:
        return np.outer(g, b), a.T @ g
    if b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def _b_l2norm(node, g, y, a):
    norm = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    proj = np.sum(g * y, axis=-1, keepdims=True)
    return (np.where(norm > 0, (g - y * proj) / safe, 0),)


def _b_softmax_ce(node, g, out, z, t):
    n = z.shape[0]
    logp = _log_softmax(z)
    p = np.exp(logp)
    gz = (p * t.sum(axis=-1, keepdims=True) - t) * (g[0] / n)
    gt = -logp * (g[0] / n)
    return gz, gt


def _b_reduce(node, g, out, a):
    axis = node.attrs["axis"]
    if axis is None:
        ga = np.broadcast_to(g.reshape(()), a.shape)
        n = a.size
    else:
        ga = np.broadcast_to(np.expand_dims(g, axis), a.shape)
        n = a.shape[axis]
    if node.op == "mean":
        ga = ga / n
    return (np.array(ga),)


def _b_quadform(node, g, out, v, m):
    gv = np.expand_dims(g, -1) * (v @ (m + m.T))
    if v.ndim == 1:
        gm = g * np.outer(v, v)
    else:
        gm = (v * np.expand_dims(g, -1)).T @ v
    return gv, gm


_BACKWARD = {
    "add": lambda node, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda node, g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    "scale": lambda node, g, out, a: (g * node.attrs["c"],),
    "matmul": _b_matmul,
    "relu": lambda node, g, out, a: (np.where(a > 0, g, 0),),
    "l2norm": _b_l2norm,
    "softmax_ce": _b_softmax_ce,
    "square": lambda node, g, out, a: (2 * a * g,),
    "sum": _b_reduce,
    "mean": _b_reduce,
    "quadform": _b_quadform,
}


def fd_check(graph: Graph, bindings: Mapping[str, Any], wrt: str, h: float = 1e-3,
             output: Node | None = None, coords: Iterable[int] | None = None) -> float:
    """Compare analytic gradients against central differences.

    Both sides are evaluated in float64.  Returns the max over the checked
    coordinates (all of them by default) of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    if output is None:
        output = graph.nodes[-1]
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    graph.forward(base, output, dtype=np.float64)
    analytic = graph.grad(output, [wrt])[wrt].ravel()

    x = base[wrt]
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = graph.forward(base, output, dtype=np.float64)[0]
        flat[i] = orig - h
        f_minus = graph.forward(base, output, dtype=np.float64)[0]
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    # leave the caches consistent with the unperturbed point
    graph.forward(base, output, dtype=np.float64)
    return float(worst)
