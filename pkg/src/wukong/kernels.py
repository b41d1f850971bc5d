"""Dense tensor ops and reverse-mode automatic differentiation.

Tensors are plain C-contiguous numpy arrays (float32 for training,
float64 for verification runs). A Graph is a tape: an ordered list of
nodes, each holding its op kind, input node ids, an aux payload and the
output array. Replaying the tape over the same leaf values is
bit-identical; `backward` walks the tape once in reverse.

FLOP convention (used consistently by the symbolic counter in
`wukong.model`): one multiply-add counts as 2 FLOPs.

    matmul (m x p) @ (p x q)      2*m*p*q per broadcast batch element
    add / sub / mul               1 per output element
    relu                          1 per output element
    sigmoid                       4 per output element
    layer_norm, slice width w     7*w + 3 per normalized slice
    pooled_lookup, h hot ids      max(h - 1, 0) * width adds per example
                                  (the gather itself is free)
    reshape/flatten/concat/
    transpose                     0 (data movement)
    reduce_sum over N elements    N
    bce_with_logits over B        8*B (stable form; documented constant)
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError

DTYPES = {32: np.float32, 64: np.float64}


def as_tensor(value, dtype) -> np.ndarray:
    """Coerce to a C-contiguous array of the graph's element type."""
    return np.ascontiguousarray(value, dtype=dtype)


@dataclass
class Node:
    """One tape entry: op kind, input node ids, aux payload, output array."""

    graph: "Graph"
    nid: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    aux: Any = None
    name: Optional[str] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, self.graph.lift(other))

    def __radd__(self, other):
        return add(self.graph.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.graph.lift(other))

    def __mul__(self, other):
        return mul(self, self.graph.lift(other))

    def __rmul__(self, other):
        return mul(self.graph.lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self.graph.lift(other))


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[Optional[np.ndarray]]]
    flops: Callable[..., int]


_OPS: dict[str, OpDef] = {}


def _register(name: str, forward, vjp, flops):
    _OPS[name] = OpDef(forward, vjp, flops)


class Graph:
    """Single-writer tape of ops over immutable tensors.

    Nodes are topologically ordered by construction. Parameters are leaf
    nodes marked at creation; `backward` returns one gradient per
    parameter node (zeros for parameters the loss does not reach).
    """

    def __init__(self, dtype=np.float64, check_finite: bool = True,
                 count_flops: bool = False):
        if dtype in DTYPES:
            dtype = DTYPES[dtype]
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []
        self.flop_counts: Optional[dict[str, int]] = {} if count_flops else None
        self._scopes: list[str] = []

    # -- leaves ---------------------------------------------------------

    def input(self, value, name: Optional[str] = None) -> Node:
        return self._leaf("input", value, name)

    def param(self, value, name: str) -> Node:
        node = self._leaf("param", value, name)
        self.param_ids.append(node.nid)
        return node

    def lift(self, value) -> Node:
        if isinstance(value, Node):
            if value.graph is not self:
                raise ConfigError("node belongs to a different graph")
            return value
        return self.input(np.asarray(value))

    def _leaf(self, op: str, value, name) -> Node:
        arr = as_tensor(value, self.dtype)
        node = Node(self, len(self.nodes), op, (), arr, name=name)
        self.nodes.append(node)
        return node

    # -- op application --------------------------------------------------

    @contextmanager
    def scope(self, label: str):
        """Attribute the FLOPs of ops applied inside to `label`."""
        self._scopes.append(label)
        try:
            yield
        finally:
            self._scopes.pop()

    def apply(self, op: str, inputs: Sequence[Node], aux=None) -> Node:
        opdef = _OPS[op]
        values = [n.value for n in inputs]
        out = opdef.forward(*values, aux=aux)
        if self.check_finite and not np.all(np.isfinite(out)):
            where = self._scopes[-1] if self._scopes else "unscoped"
            raise NumericError(f"non-finite values from op '{op}' in '{where}'")
        if self.flop_counts is not None:
            label = self._scopes[-1] if self._scopes else "unscoped"
            cost = opdef.flops([v.shape for v in values], out.shape, aux)
            self.flop_counts[label] = self.flop_counts.get(label, 0) + cost
        node = Node(self, len(self.nodes), op,
                    tuple(n.nid for n in inputs), out, aux=aux)
        self.nodes.append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Recompute every non-leaf node from the recorded tape.

        Returns the recomputed values in node order; leaves are returned
        as stored. Used to check the bit-identical-replay invariant.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("input", "param"):
                values.append(node.value)
            else:
                ins = [values[i] for i in node.inputs]
                values.append(_OPS[node.op].forward(*ins, aux=node.aux))
        return values

    def total_flops(self) -> int:
        if self.flop_counts is None:
            raise ConfigError("graph was built without count_flops=True")
        return sum(self.flop_counts.values())


GradientMap = dict[int, np.ndarray]


def backward(graph: Graph, loss: Node) -> GradientMap:
    """Reverse sweep from a scalar loss node.

    Returns a gradient tensor per parameter node id, including zero
    tensors for parameters the loss does not depend on.
    """
    if loss.value.shape != ():
        raise ConfigError(f"loss node must be scalar, got shape {loss.value.shape}")
    adjoints: dict[int, np.ndarray] = {
        loss.nid: np.ones((), dtype=graph.dtype)
    }
    for node in reversed(graph.nodes[: loss.nid + 1]):
        grad = adjoints.get(node.nid)
        if grad is None or not node.inputs:
            continue
        ins = [graph.nodes[i] for i in node.inputs]
        input_grads = _OPS[node.op].vjp(
            [n.value for n in ins], node.value, grad, node.aux
        )
        for inp, ig in zip(ins, input_grads):
            if ig is None:
                continue
            acc = adjoints.get(inp.nid)
            adjoints[inp.nid] = ig if acc is None else acc + ig
    out: GradientMap = {}
    for pid in graph.param_ids:
        pnode = graph.nodes[pid]
        g = adjoints.get(pid)
        out[pid] = np.zeros_like(pnode.value) if g is None else g
    return out


# -- broadcasting helper -------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------


def _fw_add(a, b, aux):
    return a + b


def _vjp_add(ins, out, g, aux):
    a, b = ins
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _fw_sub(a, b, aux):
    return a - b


def _vjp_sub(ins, out, g, aux):
    a, b = ins
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


def _fw_mul(a, b, aux):
    return a * b


def _vjp_mul(ins, out, g, aux):
    a, b = ins
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _flops_elementwise(in_shapes, out_shape, aux) -> int:
    return int(np.prod(out_shape, dtype=np.int64))


_register("add", _fw_add, _vjp_add, _flops_elementwise)
_register("sub", _fw_sub, _vjp_sub, _flops_elementwise)
_register("mul", _fw_mul, _vjp_mul, _flops_elementwise)


def add(a: Node, b: Node) -> Node:
    return a.graph.apply("add", [a, b])


def sub(a: Node, b: Node) -> Node:
    return a.graph.apply("sub", [a, b])


def mul(a: Node, b: Node) -> Node:
    return a.graph.apply("mul", [a, b])


# -- matmul ---------------------------------------------------------------


def _fw_matmul(a, b, aux):
    return np.matmul(a, b)


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def _vjp_matmul(ins, out, g, aux):
    a, b = ins
    ga = np.matmul(g, _swap_last(b))
    gb = np.matmul(_swap_last(a), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _flops_matmul(in_shapes, out_shape, aux) -> int:
    (_, p) = in_shapes[0][-2:]
    batch = int(np.prod(out_shape[:-2], dtype=np.int64)) if len(out_shape) > 2 else 1
    m, q = out_shape[-2], out_shape[-1]
    return 2 * batch * m * p * q


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ConfigError(
            f"matmul expects >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a.graph.apply("matmul", [a, b])


# -- shape ops (zero FLOPs) ------------------------------------------------


def _fw_reshape(x, aux):
    return np.ascontiguousarray(x).reshape(aux["shape"])


def _vjp_reshape(ins, out, g, aux):
    return [np.ascontiguousarray(g).reshape(ins[0].shape)]


def _flops_zero(in_shapes, out_shape, aux) -> int:
    return 0


_register("reshape", _fw_reshape, _vjp_reshape, _flops_zero)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.value.size:
        raise ConfigError(f"cannot reshape {x.shape} to {shape}")
    return x.graph.apply("reshape", [x], aux={"shape": shape})


def flatten(x: Node) -> Node:
    """Collapse all axes after the first (per-example flatten)."""
    if x.value.ndim < 2:
        raise ConfigError(f"flatten expects >=2-d input, got {x.shape}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64))))


def _fw_transpose(x, aux):
    return np.ascontiguousarray(np.transpose(x, aux["axes"]))


def _vjp_transpose(ins, out, g, aux):
    inv = np.argsort(aux["axes"])
    return [np.ascontiguousarray(np.transpose(g, inv))]


_register("transpose", _fw_transpose, _vjp_transpose, _flops_zero)


def transpose(x: Node, axes: Optional[Sequence[int]] = None) -> Node:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.value.ndim < 2:
            raise ConfigError(f"transpose expects >=2-d input, got {x.shape}")
        axes = list(range(x.value.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.graph.apply("transpose", [x], aux={"axes": tuple(axes)})


def _fw_concat(*xs, aux):
    return np.concatenate(xs, axis=aux["axis"])


def _vjp_concat(ins, out, g, aux):
    axis = aux["axis"]
    sizes = [x.shape[axis] for x in ins]
    splits = np.cumsum(sizes[:-1])
    return [np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis)]


_register("concat", _fw_concat, _vjp_concat, _flops_zero)


def concat(xs: Sequence[Node], axis: int) -> Node:
    if not xs:
        raise ConfigError("concat of zero tensors")
    g = xs[0].graph
    ndim = xs[0].value.ndim
    for x in xs[1:]:
        rest = [s for i, s in enumerate(x.shape) if i != axis % ndim]
        ref = [s for i, s in enumerate(xs[0].shape) if i != axis % ndim]
        if x.value.ndim != ndim or rest != ref:
            raise ConfigError(
                f"concat shape mismatch along axis {axis}: "
                f"{xs[0].shape} vs {x.shape}"
            )
    return g.apply("concat", list(xs), aux={"axis": axis})


# -- activations ------------------------------------------------------------


def _fw_relu(x, aux):
    return np.maximum(x, 0)


def _vjp_relu(ins, out, g, aux):
    return [g * (ins[0] > 0)]


_register("relu", _fw_relu, _vjp_relu, _flops_elementwise)


def relu(x: Node) -> Node:
    return x.graph.apply("relu", [x])


def _fw_sigmoid(x, aux):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _vjp_sigmoid(ins, out, g, aux):
    return [g * out * (1.0 - out)]


def _flops_sigmoid(in_shapes, out_shape, aux) -> int:
    return 4 * int(np.prod(out_shape, dtype=np.int64))


_register("sigmoid", _fw_sigmoid, _vjp_sigmoid, _flops_sigmoid)


def sigmoid(x: Node) -> Node:
    return x.graph.apply("sigmoid", [x])


# -- layer norm --------------------------------------------------------------


def _fw_layer_norm(x, gain, bias, aux):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + aux["eps"])
    return gain * (centered * rstd) + bias


def _vjp_layer_norm(ins, out, g, aux):
    x, gain, bias = ins
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + aux["eps"])
    xhat = centered * rstd
    gy = g * gain
    dx = rstd * (
        gy
        - gy.mean(axis=-1, keepdims=True)
        - xhat * np.mean(gy * xhat, axis=-1, keepdims=True)
    )
    dgain = _unbroadcast(g * xhat, gain.shape)
    dbias = _unbroadcast(g, bias.shape)
    return [dx, dgain, dbias]


def _flops_layer_norm(in_shapes, out_shape, aux) -> int:
    w = out_shape[-1]
    slices = int(np.prod(out_shape[:-1], dtype=np.int64))
    return slices * (7 * w + 3)


_register("layer_norm", _fw_layer_norm, _vjp_layer_norm, _flops_layer_norm)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize each last-axis slice to zero mean / unit variance.

    `gain` and `bias` must broadcast against the trailing axes of `x`
    (the plain case is both of width x.shape[-1]).
    """
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    if x.shape[-1] == 0:
        raise ConfigError("layer_norm over a zero-length last axis")
    for p in (gain, bias):
        try:
            np.broadcast_shapes(p.shape, x.shape[1:] or x.shape)
        except ValueError:
            raise ConfigError(
                f"layer_norm affine shape {p.shape} does not broadcast "
                f"against slices of {x.shape}"
            ) from None
    return x.graph.apply("layer_norm", [x, gain, bias], aux={"eps": float(eps)})


# -- pooled embedding lookup --------------------------------------------------


def _fw_pooled_lookup(table, aux):
    ids, offsets = aux["ids"], aux["offsets"]
    batch = len(offsets) - 1
    out = np.zeros((batch, table.shape[1]), dtype=table.dtype)
    rows = np.repeat(np.arange(batch), np.diff(offsets))
    np.add.at(out, rows, table[ids])
    return out


def _vjp_pooled_lookup(ins, out, g, aux):
    table = ins[0]
    ids, offsets = aux["ids"], aux["offsets"]
    rows = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    gt = np.zeros_like(table)
    np.add.at(gt, ids, g[rows])
    return [gt]


def _flops_pooled_lookup(in_shapes, out_shape, aux) -> int:
    width = in_shapes[0][1]
    counts = np.diff(aux["offsets"])
    return int(np.maximum(counts - 1, 0).sum()) * width


_register("pooled_lookup", _fw_pooled_lookup, _vjp_pooled_lookup,
          _flops_pooled_lookup)


def pooled_lookup(table: Node, ids: np.ndarray, offsets: np.ndarray) -> Node:
    """Sum-pool table rows per example.

    `ids` are the concatenated hot ids of the batch, `offsets` the
    CSR-style boundaries (len == batch + 1). An example with no hot ids
    yields a zero row. Gradients flow only to the looked-up rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(
            f"lookup id out of range for table with {table.shape[0]} rows"
        )
    return table.graph.apply("pooled_lookup", [table],
                             aux={"ids": ids, "offsets": offsets})


# -- reductions / loss ---------------------------------------------------------


def _fw_reduce_sum(x, aux):
    return np.asarray(x.sum(), dtype=x.dtype)


def _vjp_reduce_sum(ins, out, g, aux):
    return [np.full_like(ins[0], g)]


def _flops_reduce_sum(in_shapes, out_shape, aux) -> int:
    return int(np.prod(in_shapes[0], dtype=np.int64))


_register("reduce_sum", _fw_reduce_sum, _vjp_reduce_sum, _flops_reduce_sum)


def reduce_sum(x: Node) -> Node:
    return x.graph.apply("reduce_sum", [x])


def _fw_bce_with_logits(z, y, aux):
    # mean of max(z,0) - z*y + log1p(exp(-|z|)); finite for any finite z
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return np.asarray(per.mean(), dtype=z.dtype)


def _vjp_bce_with_logits(ins, out, g, aux):
    z, y = ins
    s = _fw_sigmoid(z, None)
    return [g * (s - y) / z.shape[0], None]


def _flops_bce_with_logits(in_shapes, out_shape, aux) -> int:
    return 8 * int(in_shapes[0][0])


_register("bce_with_logits", _fw_bce_with_logits, _vjp_bce_with_logits,
          _flops_bce_with_logits)


def bce_with_logits(logits: Node, labels: Node) -> Node:
    """Mean binary cross-entropy from logits, in the stable form."""
    if logits.shape != labels.shape:
        raise ConfigError(
            f"logits shape {logits.shape} != labels shape {labels.shape}"
        )
    return logits.graph.apply("bce_with_logits", [logits, labels])
