"""Computation graphs, forward evaluation and a reference reverse-mode AD engine.

Every vertex value carries a leading batch axis: a vertex declared with shape
``(3,)`` holds arrays of shape ``(batch, 3)``. Each non-input vertex is
produced by exactly one :class:`EdgeFunction` applied to an ordered tuple of
parent vertices. Parameterised edges refer to tensors in the graph's
parameter table by name.

Linear-map and conv2d edges may carry a fused output activation and bias so a
dense layer is one vertex rather than two; that keeps graph depth equal to the
layer count used in the templates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .numcore import (
    layer_variance,
    ActivationKind,
    FreegradError,
    ShapeError,
    Tensor,
    activation_apply,
    activation_deriv,
    as_tensor,
    gaussian_init,
    make_rng,
)


class GraphError(FreegradError):
    """Structural problem with a graph or with the values bound to it."""


class EdgeKind(str, enum.Enum):
    LINEAR = "linear-map"
    ACTIVATION = "elementwise-activation"
    ADD = "add"
    MULTIPLY = "multiply"
    CONCAT = "concat"
    SQRT = "sqrt"
    TAN = "tan"
    SIN = "sin"
    SQUARE = "square"
    CONV2D = "conv2d"
    MAXPOOL = "max-pool"


_UNARY = {EdgeKind.ACTIVATION, EdgeKind.SQRT, EdgeKind.TAN, EdgeKind.SIN, EdgeKind.SQUARE,
          EdgeKind.LINEAR, EdgeKind.CONV2D, EdgeKind.MAXPOOL}


@dataclass(frozen=True)
class EdgeFunction:
    """A function from parent vertex values to one child value.

    ``param`` names the weight tensor for linear-map and conv2d edges; ``bias``
    optionally names a bias vector; ``activation`` is the fused output
    nonlinearity for those kinds and the applied function for
    elementwise-activation edges. ``pool`` is the window for max-pool.
    """

    kind: EdgeKind
    param: str | None = None
    bias: str | None = None
    activation: ActivationKind = ActivationKind.IDENTITY
    pool: int = 2

    def param_names(self) -> tuple[str, ...]:
        return tuple(n for n in (self.param, self.bias) if n is not None)


@dataclass(frozen=True)
class Edge:
    child: str
    parents: tuple[str, ...]
    fn: EdgeFunction


# ----------------------------------------------------------------------------
# Local rules: forward, vertex VJP, parameter gradient.
# ----------------------------------------------------------------------------


def edge_forward(fn: EdgeFunction, parents: Sequence[Tensor], params: Mapping[str, Tensor]):
    """Return ``(value, cache)``; the cache feeds :func:`edge_vjp`."""
    k = fn.kind
    if k is EdgeKind.LINEAR:
        x = parents[0].reshape(parents[0].shape[0], -1)
        w = params[fn.param]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear-map {fn.param}: input width {x.shape[1]} vs weight {w.shape}")
        pre = x @ w.T
        if fn.bias is not None:
            pre = pre + params[fn.bias]
        return activation_apply(fn.activation, pre), pre
    if k is EdgeKind.CONV2D:
        x = parents[0]
        w = params[fn.param]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d {fn.param}: input {x.shape} vs kernel {w.shape}")
        pre = kernels.conv2d_forward(x, w)
        if fn.bias is not None:
            pre = pre + params[fn.bias][None, :, None, None]
        return activation_apply(fn.activation, pre), pre
    if k is EdgeKind.MAXPOOL:
        out, arg = kernels.maxpool2d_forward(parents[0], fn.pool)
        return out, arg
    if k is EdgeKind.ACTIVATION:
        return activation_apply(fn.activation, parents[0]), None
    if k is EdgeKind.ADD:
        out = parents[0].copy()
        for p in parents[1:]:
            out = out + p
        return out, None
    if k is EdgeKind.MULTIPLY:
        out = parents[0].copy()
        for p in parents[1:]:
            out = out * p
        return out, None
    if k is EdgeKind.CONCAT:
        return np.concatenate([p.reshape(p.shape[0], -1) for p in parents], axis=1), None
    if k is EdgeKind.SQRT:
        return np.sqrt(parents[0]), None
    if k is EdgeKind.TAN:
        return np.tan(parents[0]), None
    if k is EdgeKind.SIN:
        return np.sin(parents[0]), None
    if k is EdgeKind.SQUARE:
        return parents[0] * parents[0], None
    raise GraphError(f"unknown edge kind {k}")


def _pre_cotangent(fn: EdgeFunction, cache, cot: Tensor) -> Tensor:
    if fn.activation is ActivationKind.IDENTITY:
        return cot
    return cot * activation_deriv(fn.activation, cache)


def edge_vjp(fn: EdgeFunction, parents: Sequence[Tensor], params: Mapping[str, Tensor],
             value: Tensor, cache, cot: Tensor) -> list[Tensor]:
    """Cotangents for each parent given the child cotangent ``cot``."""
    k = fn.kind
    if k is EdgeKind.LINEAR:
        g = _pre_cotangent(fn, cache, cot)
        return [(g @ params[fn.param]).reshape(parents[0].shape)]
    if k is EdgeKind.CONV2D:
        g = _pre_cotangent(fn, cache, cot)
        x = parents[0]
        return [kernels.conv2d_backward_input(g, params[fn.param], x.shape[2], x.shape[3])]
    if k is EdgeKind.MAXPOOL:
        x = parents[0]
        return [kernels.maxpool2d_backward(cot, cache, x.shape[2], x.shape[3])]
    if k is EdgeKind.ACTIVATION:
        return [cot * activation_deriv(fn.activation, parents[0])]
    if k is EdgeKind.ADD:
        return [cot for _ in parents]
    if k is EdgeKind.MULTIPLY:
        outs = []
        for i in range(len(parents)):
            g = cot
            for j, p in enumerate(parents):
                if j != i:
                    g = g * p
            outs.append(g)
        return outs
    if k is EdgeKind.CONCAT:
        outs, start = [], 0
        for p in parents:
            width = int(np.prod(p.shape[1:]))
            outs.append(cot[:, start:start + width].reshape(p.shape))
            start += width
        return outs
    if k is EdgeKind.SQRT:
        return [cot * 0.5 / value]
    if k is EdgeKind.TAN:
        return [cot * (1.0 + value * value)]
    if k is EdgeKind.SIN:
        return [cot * np.cos(parents[0])]
    if k is EdgeKind.SQUARE:
        return [cot * 2.0 * parents[0]]
    raise GraphError(f"unknown edge kind {k}")


def edge_param_grads(fn: EdgeFunction, parents: Sequence[Tensor], params: Mapping[str, Tensor],
                     cache, cot: Tensor) -> dict[str, Tensor]:
    """Parameter gradients, summed over the batch axis."""
    if fn.kind is EdgeKind.LINEAR:
        g = _pre_cotangent(fn, cache, cot)
        x = parents[0].reshape(parents[0].shape[0], -1)
        out = {fn.param: g.T @ x}
        if fn.bias is not None:
            out[fn.bias] = g.sum(axis=0)
        return out
    if fn.kind is EdgeKind.CONV2D:
        g = _pre_cotangent(fn, cache, cot)
        w = params[fn.param]
        out = {fn.param: kernels.conv2d_backward_weight(parents[0], g, w.shape[2], w.shape[3])}
        if fn.bias is not None:
            out[fn.bias] = g.sum(axis=(0, 2, 3))
        return out
    return {}


def _infer_shape(fn: EdgeFunction, parent_shapes: Sequence[tuple[int, ...]],
                 params: Mapping[str, Tensor]) -> tuple[int, ...]:
    k = fn.kind
    if k in _UNARY and len(parent_shapes) != 1:
        raise GraphError(f"{k.value} edge takes one parent, got {len(parent_shapes)}")
    if k is EdgeKind.LINEAR:
        w = params[fn.param]
        width = int(np.prod(parent_shapes[0]))
        if w.ndim != 2 or w.shape[1] != width:
            raise ShapeError(f"weight {fn.param} {w.shape} cannot map input of width {width}")
        if fn.bias is not None and params[fn.bias].shape != (w.shape[0],):
            raise ShapeError(f"bias {fn.bias} has shape {params[fn.bias].shape}, expected ({w.shape[0]},)")
        return (w.shape[0],)
    if k is EdgeKind.CONV2D:
        w = params[fn.param]
        c, h, wd = parent_shapes[0]
        if w.ndim != 4 or w.shape[1] != c or w.shape[2] > h or w.shape[3] > wd:
            raise ShapeError(f"kernel {fn.param} {w.shape} does not fit input {parent_shapes[0]}")
        return (w.shape[0], h - w.shape[2] + 1, wd - w.shape[3] + 1)
    if k is EdgeKind.MAXPOOL:
        c, h, wd = parent_shapes[0]
        return (c, h // fn.pool, wd // fn.pool)
    if k in (EdgeKind.ADD, EdgeKind.MULTIPLY):
        if len(set(parent_shapes)) != 1:
            raise ShapeError(f"{k.value} edge needs equal parent shapes, got {list(parent_shapes)}")
        return parent_shapes[0]
    if k is EdgeKind.CONCAT:
        return (sum(int(np.prod(s)) for s in parent_shapes),)
    return parent_shapes[0]


# ----------------------------------------------------------------------------
# Graph container and builder.
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ComputationGraph:
    """Immutable DAG. Use :class:`GraphBuilder` to construct one."""

    shapes: Mapping[str, tuple[int, ...]]
    edges: Mapping[str, Edge]
    inputs: tuple[str, ...]
    output: str
    params: Mapping[str, Tensor]
    order: tuple[str, ...]

    @property
    def vertices(self) -> tuple[str, ...]:
        return tuple(self.shapes)

    @property
    def computed(self) -> tuple[str, ...]:
        """Non-input vertices in topological order."""
        return tuple(v for v in self.order if v not in self.inputs)

    def children(self, vertex: str) -> list[str]:
        return [e.child for e in self.edges.values() if vertex in e.parents]

    def with_params(self, params: Mapping[str, Tensor]) -> "ComputationGraph":
        """Copy of this graph with (some) parameter tensors replaced."""
        merged = dict(self.params)
        for name, value in params.items():
            if name not in merged:
                raise GraphError(f"unknown parameter {name!r}")
            value = as_tensor(value, name=name)
            if value.shape != merged[name].shape:
                raise ShapeError(f"parameter {name}: {value.shape} vs {merged[name].shape}")
            merged[name] = value
        return ComputationGraph(self.shapes, self.edges, self.inputs, self.output, merged, self.order)

    def topological_orders_valid(self, order: Sequence[str]) -> bool:
        seen: set[str] = set()
        for v in order:
            if v in self.edges and not all(p in seen for p in self.edges[v].parents):
                return False
            seen.add(v)
        return seen == set(self.shapes) and len(order) == len(self.shapes)


class GraphBuilder:
    """Incremental construction; ``build`` validates and freezes the graph."""

    def __init__(self) -> None:
        self._shapes: dict[str, tuple[int, ...]] = {}
        self._edges: dict[str, Edge] = {}
        self._inputs: list[str] = []
        self._params: dict[str, Tensor] = {}

    def input(self, name: str, shape: Sequence[int] | int) -> str:
        self._check_new(name)
        self._shapes[name] = (shape,) if isinstance(shape, int) else tuple(shape)
        self._inputs.append(name)
        return name

    def param(self, name: str, value) -> str:
        if name in self._params:
            raise GraphError(f"duplicate parameter {name!r}")
        self._params[name] = as_tensor(value, name=name)
        return name

    def add(self, name: str, fn: EdgeFunction, *parents: str) -> str:
        self._check_new(name)
        for p in parents:
            if p not in self._shapes:
                raise GraphError(f"vertex {name!r} refers to unknown parent {p!r}")
        for pname in fn.param_names():
            if pname not in self._params:
                raise GraphError(f"edge into {name!r} refers to unknown parameter {pname!r}")
        self._shapes[name] = _infer_shape(fn, [self._shapes[p] for p in parents], self._params)
        self._edges[name] = Edge(name, tuple(parents), fn)
        return name

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    def _check_new(self, name: str) -> None:
        if name in self._shapes:
            raise GraphError(f"duplicate vertex {name!r}")

    def build(self, output: str) -> ComputationGraph:
        if output not in self._shapes:
            raise GraphError(f"output vertex {output!r} does not exist")
        order = _kahn(self._shapes, self._edges)
        # Every parameterised edge must reach the output.
        reach = {output}
        for v in reversed(order):
            if v in reach and v in self._edges:
                reach.update(self._edges[v].parents)
        for e in self._edges.values():
            if e.fn.param_names() and e.child not in reach:
                raise GraphError(f"parameterised edge into {e.child!r} cannot reach output {output!r}")
        return ComputationGraph(dict(self._shapes), dict(self._edges), tuple(self._inputs), output,
                                dict(self._params), tuple(order))


def _kahn(shapes: Mapping[str, tuple], edges: Mapping[str, Edge]) -> list[str]:
    indeg = {v: (len(set(edges[v].parents)) if v in edges else 0) for v in shapes}
    kids: dict[str, list[str]] = {v: [] for v in shapes}
    for e in edges.values():
        for p in dict.fromkeys(e.parents):
            kids[p].append(e.child)
    ready = [v for v in shapes if indeg[v] == 0]
    order: list[str] = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in kids[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(shapes):
        raise GraphError("graph contains a cycle")
    return order


# ----------------------------------------------------------------------------
# Evaluation.
# ----------------------------------------------------------------------------


@dataclass
class ForwardPass:
    """Per-vertex feedforward values plus the caches needed for VJPs."""

    graph: ComputationGraph
    values: dict[str, Tensor]
    caches: dict[str, object] = field(default_factory=dict)
    params: Mapping[str, Tensor] = field(default_factory=dict)

    @property
    def output(self) -> Tensor:
        return self.values[self.graph.output]


@dataclass
class AdjointTape:
    """Adjoints dL/dv for every vertex and dL/dtheta for every parameter."""

    adjoints: dict[str, Tensor]
    param_grads: dict[str, Tensor]


def _bind_inputs(graph: ComputationGraph, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    values: dict[str, Tensor] = {}
    batch = None
    for name in graph.inputs:
        if name not in inputs:
            raise GraphError(f"input vertex {name!r} is unbound")
        x = as_tensor(inputs[name], name=name)
        if x.shape[1:] != graph.shapes[name]:
            raise ShapeError(f"input {name!r}: got {x.shape}, expected (batch, *{graph.shapes[name]})")
        if batch is not None and x.shape[0] != batch:
            raise ShapeError(f"input {name!r} batch {x.shape[0]} differs from {batch}")
        batch = x.shape[0]
        values[name] = x
    return values


def forward(graph: ComputationGraph, inputs: Mapping[str, Tensor], params: Mapping[str, Tensor] | None = None,
            order: Sequence[str] | None = None) -> ForwardPass:
    """Evaluate every vertex in topological order (``order`` may override)."""
    params = graph.params if params is None else {**graph.params, **params}
    if order is None:
        order = graph.order
    elif not graph.topological_orders_valid(order):
        raise GraphError("supplied vertex order is not a topological order of the graph")
    values = _bind_inputs(graph, inputs)
    caches: dict[str, object] = {}
    for v in order:
        if v in values:
            continue
        e = graph.edges[v]
        values[v], caches[v] = edge_forward(e.fn, [values[p] for p in e.parents], params)
    return ForwardPass(graph, values, caches, params)


def reverse_ad(graph: ComputationGraph, inputs: Mapping[str, Tensor] | None, loss_grad_at_output: Tensor,
               fwd: ForwardPass | None = None) -> AdjointTape:
    """Reference reverse-mode AD.

    Adjoints are accumulated while visiting vertices in reverse topological
    order, so multi-path contributions are summed deterministically.
    ``fwd`` may be supplied to reuse a forward pass; otherwise ``inputs`` are
    evaluated first.
    """
    if fwd is None:
        if inputs is None:
            raise GraphError("reverse_ad needs either inputs or a forward pass")
        fwd = forward(graph, inputs)
    elif fwd.graph is not graph:
        raise GraphError("forward pass belongs to a different graph")
    out_val = fwd.values[graph.output]
    seed = as_tensor(loss_grad_at_output, name="loss gradient")
    if seed.shape != out_val.shape:
        raise ShapeError(f"loss gradient {seed.shape} vs output value {out_val.shape}")
    adj: dict[str, Tensor] = {v: np.zeros_like(fwd.values[v]) for v in graph.order}
    adj[graph.output] = seed.copy()
    grads: dict[str, Tensor] = {n: np.zeros_like(p) for n, p in fwd.params.items()}
    for v in reversed(graph.order):
        e = graph.edges.get(v)
        if e is None:
            continue
        parents = [fwd.values[p] for p in e.parents]
        cot = adj[v]
        for p, g in zip(e.parents, edge_vjp(e.fn, parents, fwd.params, fwd.values[v], fwd.caches[v], cot)):
            adj[p] += g
        for n, g in edge_param_grads(e.fn, parents, fwd.params, fwd.caches[v], cot).items():
            grads[n] += g
    return AdjointTape(adj, grads)


def pullback(fwd: ForwardPass, cotangents: Mapping[str, Tensor],
             skip: Iterable[str] = ()) -> dict[str, Tensor]:
    """One simultaneous sweep: sum_j cot_j * d v_j / d v_i for every vertex i.

    Unlike :func:`reverse_ad`, each edge reads only the supplied cotangent of
    its own child; nothing propagates further. Predictive coding uses this as
    its per-step feedback term. Edges whose parents all lie in ``skip`` are not
    evaluated (their parents keep a zero entry), which saves the widest
    products when input feedback is not needed.
    """
    g = fwd.graph
    skip = frozenset(skip)
    out = {v: np.zeros_like(fwd.values[v]) for v in g.order}
    for v, e in g.edges.items():
        cot = cotangents.get(v)
        if cot is None or (skip and all(p in skip for p in e.parents)):
            continue
        parents = [fwd.values[p] for p in e.parents]
        for p, contrib in zip(e.parents, edge_vjp(e.fn, parents, fwd.params, fwd.values[v], fwd.caches[v], cot)):
            out[p] += contrib
    return out


def param_grads_from_cotangents(fwd: ForwardPass, cotangents: Mapping[str, Tensor]) -> dict[str, Tensor]:
    g = fwd.graph
    grads = {n: np.zeros_like(p) for n, p in fwd.params.items()}
    for v, e in g.edges.items():
        cot = cotangents.get(v)
        if cot is None:
            continue
        parents = [fwd.values[p] for p in e.parents]
        for n, gr in edge_param_grads(e.fn, parents, fwd.params, fwd.caches[v], cot).items():
            grads[n] += gr
    return grads


# ----------------------------------------------------------------------------
# Templates.
# ----------------------------------------------------------------------------


def build_scalar_test(theta: float = 2.0) -> ComputationGraph:
    """v_out = tan(sqrt(theta * v0)) + sin(v0 ** 2), with theta a 1x1 parameter."""
    b = GraphBuilder()
    b.input("v0", 1)
    b.param("theta", [[theta]])
    b.add("prod", EdgeFunction(EdgeKind.LINEAR, param="theta"), "v0")
    b.add("root", EdgeFunction(EdgeKind.SQRT), "prod")
    b.add("tan", EdgeFunction(EdgeKind.TAN), "root")
    b.add("square", EdgeFunction(EdgeKind.SQUARE), "v0")
    b.add("sin", EdgeFunction(EdgeKind.SIN), "square")
    b.add("out", EdgeFunction(EdgeKind.ADD), "tan", "sin")
    return b.build("out")


def build_mlp(layer_sizes: Sequence[int], activation: ActivationKind | str = ActivationKind.TANH,
              seed: int = 0, variance: float | str = 0.05, bias: bool = True) -> ComputationGraph:
    """Chain of dense layers; hidden layers use ``activation``, the output is linear.

    Weights are N(0, variance) draws; biases start at zero. Weight ``W{l}``
    has shape ``(layer_sizes[l], layer_sizes[l-1])``.
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise GraphError("an MLP needs at least an input and an output size")
    act = ActivationKind.parse(activation)
    rng = make_rng(seed)
    b = GraphBuilder()
    prev = b.input("x", sizes[0])
    n_layers = len(sizes) - 1
    for l in range(1, len(sizes)):
        b.param(f"W{l}", gaussian_init((sizes[l], sizes[l - 1]), 0.0, layer_variance(variance, sizes[l - 1]), rng))
        bname = None
        if bias:
            bname = b.param(f"b{l}", np.zeros(sizes[l]))
        fn = EdgeFunction(EdgeKind.LINEAR, param=f"W{l}", bias=bname,
                          activation=act if l < n_layers else ActivationKind.IDENTITY)
        prev = b.add(f"h{l}" if l < n_layers else "out", fn, prev)
    return b.build("out")


def build_lstm_cell(hidden: int, input: int, output: int | None = None, seed: int = 0,
                    variance: float = 0.05) -> ComputationGraph:
    """One LSTM cell without biases: inputs h, x, c; output y = sigmoid(theta_y v10)."""
    if hidden < 1 or input < 1:
        raise GraphError("LSTM sizes must be at least 1")
    output = hidden if output is None else output
    rng = make_rng(seed)
    sig, tanh = ActivationKind.SIGMOID, ActivationKind.TANH
    b = GraphBuilder()
    b.input("h", hidden)
    b.input("x", input)
    b.input("c", hidden)
    width = hidden + input
    for name in ("theta_i", "theta_inp", "theta_c", "theta_o"):
        b.param(name, gaussian_init((hidden, width), 0.0, variance, rng))
    b.param("theta_y", gaussian_init((output, hidden), 0.0, variance, rng))
    b.add("v1", EdgeFunction(EdgeKind.CONCAT), "h", "x")
    b.add("v2", EdgeFunction(EdgeKind.LINEAR, param="theta_i", activation=sig), "v1")
    b.add("v3", EdgeFunction(EdgeKind.MULTIPLY), "c", "v2")
    b.add("v4", EdgeFunction(EdgeKind.LINEAR, param="theta_inp", activation=sig), "v1")
    b.add("v5", EdgeFunction(EdgeKind.LINEAR, param="theta_c", activation=tanh), "v1")
    b.add("v6", EdgeFunction(EdgeKind.MULTIPLY), "v4", "v5")
    b.add("v7", EdgeFunction(EdgeKind.ADD), "v3", "v6")
    b.add("v8", EdgeFunction(EdgeKind.LINEAR, param="theta_o", activation=sig), "v1")
    b.add("v9", EdgeFunction(EdgeKind.ACTIVATION, activation=tanh), "v7")
    b.add("v10", EdgeFunction(EdgeKind.MULTIPLY), "v8", "v9")
    b.add("y", EdgeFunction(EdgeKind.LINEAR, param="theta_y", activation=sig), "v10")
    return b.build("y")


def build_conv_toy(in_channels: int, out_channels: int, kernel: int, image: int, n_out: int = 4,
                   activation: ActivationKind | str = ActivationKind.TANH, pool: int | None = None,
                   seed: int = 0, variance: float = 0.05) -> ComputationGraph:
    """conv2d (+ fused activation) [-> max-pool] -> flattened linear head."""
    if kernel > image:
        raise ShapeError(f"kernel {kernel} larger than image {image}")
    rng = make_rng(seed)
    b = GraphBuilder()
    b.input("img", (in_channels, image, image))
    b.param("K", gaussian_init((out_channels, in_channels, kernel, kernel), 0.0, variance, rng))
    b.param("kb", np.zeros(out_channels))
    prev = b.add("feat", EdgeFunction(EdgeKind.CONV2D, param="K", bias="kb",
                                      activation=ActivationKind.parse(activation)), "img")
    if pool:
        prev = b.add("pooled", EdgeFunction(EdgeKind.MAXPOOL, pool=pool), prev)
    width = int(np.prod(b.shape_of(prev)))
    b.param("Wh", gaussian_init((n_out, width), 0.0, variance, rng))
    b.add("out", EdgeFunction(EdgeKind.LINEAR, param="Wh"), prev)
    return b.build("out")


def random_inputs(graph: ComputationGraph, batch: int = 1, seed: int = 0, scale: float = 1.0) -> dict[str, Tensor]:
    """Standard-normal draws (times ``scale``) for every input vertex."""
    rng = make_rng(seed)
    return {n: scale * rng.standard_normal((batch, *graph.shapes[n])) for n in graph.inputs}


def randomize_params(graph: ComputationGraph, seed: int, variance: float = 0.05) -> ComputationGraph:
    """Fresh N(0, variance) draws for every parameter (biases included)."""
    rng = make_rng(seed)
    return graph.with_params({n: gaussian_init(p.shape, 0.0, variance, rng) for n, p in graph.params.items()})


def mse_loss(output: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """0.5 * sum((output - target)^2) and its gradient with respect to output."""
    diff = np.asarray(output) - np.asarray(target)
    return 0.5 * float(np.sum(diff * diff)), diff


def flatten_params(params: Mapping[str, Tensor], names: Iterable[str] | None = None) -> Tensor:
    names = sorted(params) if names is None else list(names)
    return np.concatenate([np.asarray(params[n]).reshape(-1) for n in names]) if names else np.zeros(0)


def vertex_count(graph: ComputationGraph) -> int:
    """Number of computed (non-input) vertices."""
    return len(graph.computed)


__all__ = [
    "AdjointTape", "ComputationGraph", "Edge", "EdgeFunction", "EdgeKind", "ForwardPass", "GraphBuilder",
    "GraphError", "build_conv_toy", "build_lstm_cell", "build_mlp", "build_scalar_test", "edge_forward",
    "edge_param_grads", "edge_vjp", "flatten_params", "forward", "mse_loss", "param_grads_from_cotangents",
    "pullback", "random_inputs", "randomize_params", "reverse_ad", "vertex_count",
]

