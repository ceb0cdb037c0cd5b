# pathkernel/autodiff.py
"""
Dense float64 tensor engine with reverse-mode differentiation

Forward ops record nodes on a ComputeGraph. The graph is kept after the
forward pass so any number of seeds can be pulled back through it:
backward() takes one seed, backward_batch() a stack of seeds along a leading
axis, and output_jacobian() uses the identity stack to get all rows at once.

Shapes: forward values may carry leading batch axes; parameter gradients are
summed over them. Broadcasting is limited to adding a 1-D bias.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pathkernel.error_handling import (
    GraphStateError,
    InvalidInputError,
    NonFiniteError,
    ShapeError,
)

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Layout = Dict[str, Tuple[int, Tuple[int, ...]]]

OP_KINDS = (
    "matmul",
    "add",
    "relu",
    "embedding_lookup",
    "scaled_dot_attention",
    "log_softmax",
    "reshape",
    "slice",
    "scale",
)


@dataclass
class Node:
    """One recorded operation (or leaf) of a compute graph"""

    id: int
    kind: str
    inputs: Tuple[int, ...]
    value: Tensor
    attrs: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    requires_grad: bool = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum a (S, ...) gradient down to (S, *shape)"""
    while grad.ndim > len(shape) + 1:
        grad = grad.sum(axis=1)
    return grad


def _softmax(x: Tensor) -> Tensor:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ============================================================================
# OP RULES: forward(values, attrs) -> (out, cache); vjp(g, values, out, cache, attrs)
# g has shape (S, *out.shape); returned grads have shape (S, *input.shape)
# ============================================================================

def _matmul_forward(values, attrs):
    a, b = values
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, None


def _matmul_vjp(g, values, out, cache, attrs):
    a, b = values
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _add_forward(values, attrs):
    a, b = values
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform (bias-add only)")
    return a + b, None


def _add_vjp(g, values, out, cache, attrs):
    a, b = values
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _relu_forward(values, attrs):
    (x,) = values
    return np.maximum(x, 0.0), None


def _relu_vjp(g, values, out, cache, attrs):
    (x,) = values
    return [g * (x > 0.0)]


def _embedding_forward(values, attrs):
    (table,) = values
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids.max()) if ids.max() >= table.shape[0] else int(ids.min())
        raise InvalidInputError(
            f"embedding_lookup: token id {bad} out of range for vocabulary of {table.shape[0]}"
        )
    return table[ids], None


def _embedding_vjp(g, values, out, cache, attrs):
    (table,) = values
    ids = attrs["ids"].reshape(-1)
    onehot = np.eye(table.shape[0])[ids]
    g_rows = g.reshape(g.shape[0], ids.size, table.shape[1])
    return [np.einsum("nv,snd->svd", onehot, g_rows)]


def _attention_forward(values, attrs):
    q, k, v = values
    if not (q.shape == k.shape == v.shape) or q.ndim < 3:
        raise ShapeError(
            f"scaled_dot_attention: q, k, v must share a (..., L, H, dh) shape, "
            f"got {q.shape}, {k.shape}, {v.shape}"
        )
    scale = 1.0 / np.sqrt(q.shape[-1])
    probs = _softmax(np.einsum("...qhd,...khd->...hqk", q, k) * scale)
    out = np.einsum("...hqk,...khd->...qhd", probs, v)
    return out, {"probs": probs, "scale": scale}


def _attention_vjp(g, values, out, cache, attrs):
    q, k, v = values
    probs, scale = cache["probs"], cache["scale"]
    gv = np.einsum("...hqk,...qhd->...khd", probs, g)
    gp = np.einsum("...qhd,...khd->...hqk", g, v)
    gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
    gq = np.einsum("...hqk,...khd->...qhd", gs, k) * scale
    gk = np.einsum("...hqk,...qhd->...khd", gs, q) * scale
    return [_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)]


def _log_softmax_forward(values, attrs):
    (x,) = values
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None


def _log_softmax_vjp(g, values, out, cache, attrs):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


def _reshape_forward(values, attrs):
    (x,) = values
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}")
    return x.reshape(shape), None


def _reshape_vjp(g, values, out, cache, attrs):
    (x,) = values
    return [g.reshape((g.shape[0],) + x.shape)]


def _slice_forward(values, attrs):
    (x,) = values
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not 0 <= axis < x.ndim or not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] on axis {axis} invalid for {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)], None


def _slice_vjp(g, values, out, cache, attrs):
    (x,) = values
    grad = np.zeros((g.shape[0],) + x.shape)
    index = [slice(None)] * grad.ndim
    index[attrs["axis"] + 1] = slice(attrs["start"], attrs["stop"])
    grad[tuple(index)] = g
    return [grad]


def _scale_forward(values, attrs):
    (x,) = values
    return x * attrs["factor"], None


def _scale_vjp(g, values, out, cache, attrs):
    return [g * attrs["factor"]]


OPS: Dict[str, Tuple[Callable, Callable]] = {
    "matmul": (_matmul_forward, _matmul_vjp),
    "add": (_add_forward, _add_vjp),
    "relu": (_relu_forward, _relu_vjp),
    "embedding_lookup": (_embedding_forward, _embedding_vjp),
    "scaled_dot_attention": (_attention_forward, _attention_vjp),
    "log_softmax": (_log_softmax_forward, _log_softmax_vjp),
    "reshape": (_reshape_forward, _reshape_vjp),
    "slice": (_slice_forward, _slice_vjp),
    "scale": (_scale_forward, _scale_vjp),
}


_active = threading.local()


class ComputeGraph:
    """
    Tape of operations over a flat parameter vector

    Parameter leaves are views into `flat` located through `layout`
    (tensor name -> (offset, shape)). Gradients come back as flat vectors of
    the same length, so they line up with the parameter registry.

    Example:
        graph = ComputeGraph(params.data, params.tensors)
        with graph:
            w = graph.param("decoder.weight")
            out = forward_op("matmul", [x, w])
        grad = graph.backward(np.ones(out.shape))
    """

    def __init__(self, flat: Tensor, layout: Layout):
        self.flat = np.asarray(flat, dtype=np.float64)
        self.layout = layout
        self.nodes: List[Node] = []
        self.leaves: Dict[int, Tuple[int, Tuple[int, ...]]] = {}
        self.output: Optional[Node] = None

    def __enter__(self) -> "ComputeGraph":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_value, tb):
        _active.stack.pop()

    @property
    def size(self) -> int:
        return self.flat.size

    def _add_node(self, kind, inputs, value, attrs=None, cache=None, requires_grad=False) -> Node:
        node = Node(
            id=len(self.nodes),
            kind=kind,
            inputs=tuple(inputs),
            value=value,
            attrs=attrs or {},
            cache=cache or {},
            requires_grad=requires_grad,
        )
        self.nodes.append(node)
        self.output = node
        return node

    def param(self, name: str) -> Node:
        """Leaf node viewing one named tensor of the flat parameter vector"""
        if name not in self.layout:
            raise GraphStateError(f"no parameter tensor named '{name}'")
        offset, shape = self.layout[name]
        size = int(np.prod(shape))
        view = self.flat[offset:offset + size].reshape(shape)
        view.setflags(write=False)
        node = self._add_node("param", (), view, requires_grad=True)
        self.leaves[node.id] = (offset, tuple(shape))
        return node

    def constant(self, value) -> Node:
        return self._add_node("const", (), np.asarray(value, dtype=np.float64))

    def op(self, kind: str, inputs: Sequence[Union[Node, Tensor]], **attrs) -> Node:
        """Run one forward op and record it"""
        if kind not in OPS:
            raise GraphStateError(f"unknown op kind '{kind}'")
        nodes = [x if isinstance(x, Node) else self.constant(x) for x in inputs]
        forward, _ = OPS[kind]
        out, cache = forward([n.value for n in nodes], attrs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        return self._add_node(
            kind,
            [n.id for n in nodes],
            out,
            attrs=attrs,
            cache=cache,
            requires_grad=any(n.requires_grad for n in nodes),
        )

    def backward_batch(self, seeds: Tensor, output: Optional[Node] = None) -> Tensor:
        """
        Pull a stack of seeds back to the parameters

        Args:
            seeds: array of shape (S, *output.shape)
            output: node to differentiate, defaults to the last recorded node

        Returns:
            (S, D) array; row j equals sum_o seeds[j, o] * d out_o / d theta
        """
        output = output or self.output
        if output is None:
            raise GraphStateError("backward called before any forward op was recorded")
        seeds = np.asarray(seeds, dtype=np.float64)
        if seeds.shape[1:] != output.shape:
            raise ShapeError(f"backward: seed shape {seeds.shape[1:]} does not match output {output.shape}")
        if not np.all(np.isfinite(seeds)):
            raise NonFiniteError("backward: seed is not finite")

        n_seeds = seeds.shape[0]
        flat_grad = np.zeros((n_seeds, self.size))
        if not output.requires_grad:
            return flat_grad

        grads: Dict[int, Tensor] = {output.id: seeds}
        for node in reversed(self.nodes[:output.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.kind == "param":
                offset, shape = self.leaves[node.id]
                flat_grad[:, offset:offset + int(np.prod(shape))] += g.reshape(n_seeds, -1)
                continue
            inputs = [self.nodes[i] for i in node.inputs]
            _, vjp = OPS[node.kind]
            input_grads = vjp(g, [n.value for n in inputs], node.value, node.cache, node.attrs)
            for parent, pg in zip(inputs, input_grads):
                if not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return flat_grad

    def backward(self, seed: Tensor, output: Optional[Node] = None) -> Tensor:
        """Vector-Jacobian product for a single seed, as a flat (D,) gradient"""
        seed = np.asarray(seed, dtype=np.float64)
        return self.backward_batch(seed[None, ...], output=output)[0]

    def output_jacobian(self, output: Optional[Node] = None) -> Tensor:
        """(O, D) Jacobian of a length-O output vector"""
        output = output or self.output
        if output is None:
            raise GraphStateError("output_jacobian called before any forward op was recorded")
        if output.value.ndim != 1:
            raise ShapeError(f"output_jacobian needs a vector output, got {output.shape}")
        return self.backward_batch(np.eye(output.shape[0]), output=output)


def active_graph() -> ComputeGraph:
    stack = getattr(_active, "stack", None)
    if not stack:
        raise GraphStateError("no active ComputeGraph; use 'with graph:'")
    return stack[-1]


def forward_op(kind: str, inputs: Sequence[Union[Node, Tensor]], **attrs) -> Node:
    """Record an op on the active graph and return its node"""
    return active_graph().op(kind, inputs, **attrs)


def backward(graph: ComputeGraph, seed: Tensor) -> Tensor:
    return graph.backward(seed)


def output_jacobian(graph: ComputeGraph) -> Tensor:
    return graph.output_jacobian()
