"""Predictive coding: graph relaxation, hierarchical networks, generalized coordinates.

Sign convention used throughout: a prediction error is value minus
prediction, ``eps = Pi * (v - v_hat)``, and the free energy is
``F = sum_i (v_i - v_hat_i)^T Pi_i (v_i - v_hat_i)``. Value dynamics follow
``-dF/dv`` up to the constant factor 2 (absorbed into the rates), which makes
``F`` non-increasing for small steps.

When predictive coding is run on a computation graph, the output error is
clamped to the caller's ``dL/dv_out``. At equilibrium every vertex error then
equals the reverse-mode adjoint of that vertex.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import (
    AdjointTape,
    ComputationGraph,
    ForwardPass,
    forward,
    param_grads_from_cotangents,
    pullback,
)
from .numcore import (
    layer_variance,
    ActivationKind,
    DomainError,
    FreegradError,
    ShapeError,
    Tensor,
    activation_apply,
    activation_deriv,
    as_tensor,
    gaussian_init,
    make_rng,
)


class NonConvergenceError(FreegradError):
    """Relaxation exhausted its iteration budget (raised only in strict mode)."""


class ConvergenceWarning(UserWarning):
    """Relaxation stopped on its iteration budget rather than its tolerance."""


@dataclass(frozen=True)
class PCConfig:
    inference_rate: float = 0.1
    inference_iters: int = 100
    weight_rate: float = 0.01
    convergence_tol: float = 1e-7
    learnable_backward_weights: bool = False
    drop_nonlinear_derivs: bool = False
    error_connection_weights: bool = False
    strict: bool = False
    warn: bool = True

    def __post_init__(self) -> None:
        if not (self.inference_rate > 0 and self.weight_rate > 0 and self.convergence_tol > 0):
            raise DomainError("PCConfig rates and tolerance must be positive")
        if self.inference_iters < 1:
            raise DomainError("inference_iters must be at least 1")


# ----------------------------------------------------------------------------
# Generic state and free energy.
# ----------------------------------------------------------------------------


@dataclass
class PCState:
    """Per-vertex value, prediction, error and diagonal precision."""

    values: dict[str, Tensor]
    predictions: dict[str, Tensor]
    errors: dict[str, Tensor] = field(default_factory=dict)
    precisions: dict[str, Tensor] = field(default_factory=dict)

    def precision(self, key: str) -> Tensor | float:
        return self.precisions.get(key, 1.0)

    def refresh_errors(self) -> None:
        self.errors = {k: self.precision(k) * (self.values[k] - self.predictions[k]) for k in self.predictions}


def vfe(state: PCState) -> float:
    """Precision-weighted sum of squared prediction errors."""
    total = 0.0
    for k, pred in state.predictions.items():
        raw = state.values[k] - pred
        total += float(np.sum(raw * (state.precision(k) * raw)))
    return total


# ----------------------------------------------------------------------------
# Predictive coding on arbitrary computation graphs.
# ----------------------------------------------------------------------------


@dataclass
class PCResult:
    tape: AdjointTape
    state: PCState
    iterations: int
    residual: float
    converged: bool
    trace: list[dict[str, Tensor]] = field(default_factory=list)


def pc_backprop(graph: ComputationGraph, inputs: Mapping[str, Tensor], loss_grad_at_output: Tensor,
                config: PCConfig = PCConfig(), precisions: Mapping[str, Tensor] | None = None,
                record: bool = False, fwd: ForwardPass | None = None) -> PCResult:
    """Approximate reverse-mode AD by relaxing a predictive-coding augmentation of ``graph``.

    Predictions are frozen at their feedforward values and every value starts
    equal to its prediction, so all errors start at zero except the output's.
    Each step updates all non-output vertices at once from the previous
    iterate: ``v_i += eta * (-eps_i + sum_j eps_j dv_hat_j/dv_i)``.

    The returned tape holds the equilibrium errors as vertex adjoints. Input
    vertices have no error unit; their entries (and all parameter gradients)
    are read off the equilibrium errors of their children. With
    ``record=True`` the error dictionary after every step is kept in ``trace``.
    """
    fwd = forward(graph, inputs) if fwd is None else fwd
    out = graph.output
    g_out = as_tensor(loss_grad_at_output, name="loss gradient")
    if g_out.shape != fwd.values[out].shape:
        raise ShapeError(f"loss gradient {g_out.shape} vs output {fwd.values[out].shape}")
    prec = dict(precisions or {})
    computed = graph.computed
    # Snapshots: predictions are never written during relaxation.
    preds = {v: fwd.values[v].copy() for v in computed}
    values = {v: preds[v].copy() for v in computed}
    values[out] = preds[out] + g_out / prec.get(out, 1.0)
    state = PCState(values, preds, precisions=prec)
    eta, tol = config.inference_rate, config.convergence_tol
    free = [v for v in computed if v != out]
    trace: list[dict[str, Tensor]] = []
    residual = np.inf
    it = 0
    while True:
        state.refresh_errors()
        feedback = pullback(fwd, state.errors, skip=graph.inputs)
        direction = {v: feedback[v] - state.errors[v] for v in free}
        residual = max((float(np.max(np.abs(d))) for d in direction.values()), default=0.0)
        if residual < tol or it >= config.inference_iters:
            break
        for v in free:
            values[v] += eta * direction[v]
        it += 1
        if record:
            trace.append({v: prec.get(v, 1.0) * (values[v] - preds[v]) for v in computed})
    converged = residual < tol
    if not converged:
        msg = f"predictive coding stopped after {it} iterations with residual {residual:.3e}"
        if config.strict:
            raise NonConvergenceError(msg)
        if config.warn:
            warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    adjoints = {v: e.copy() for v, e in state.errors.items()}
    feedback = pullback(fwd, state.errors)
    for v in graph.inputs:
        adjoints[v] = feedback[v]
    grads = param_grads_from_cotangents(fwd, state.errors)
    return PCResult(AdjointTape(adjoints, grads), state, it, residual, converged, trace)


def equilibrium_residual(graph: ComputationGraph, fwd: ForwardPass, errors: Mapping[str, Tensor]) -> float:
    """Max-norm of ``eps_i - sum_j eps_j dv_hat_j/dv_i`` over non-output vertices."""
    fb = pullback(fwd, errors)
    return max((float(np.max(np.abs(errors[v] - fb[v]))) for v in graph.computed if v != graph.output),
               default=0.0)


# ----------------------------------------------------------------------------
# Hierarchical predictive coding networks.
# ----------------------------------------------------------------------------


@dataclass
class HierarchicalPCNet:
    """Layered generative network in which layer k predicts layer k+1.

    ``sizes`` runs from the top layer (index 0) to the bottom layer. In the
    supervised "reverse" arrangement the image is clamped at the top and the
    label at the bottom, so the top-down predictions coincide with an MLP's
    forward pass. ``weights[k]`` has shape ``(sizes[k+1], sizes[k])``.
    ``backward_weights[k]`` (if present) has the transposed shape and
    replaces ``weights[k].T`` when errors are sent upward.
    ``error_weights[k]`` (if present) is the square matrix psi for layer k+1
    so that ``eps_{k+1} = psi mu_{k+1} - f(W_k mu_k + b_k)``.
    """

    sizes: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: ActivationKind = ActivationKind.TANH
    output_activation: ActivationKind = ActivationKind.IDENTITY
    backward_weights: list[Tensor] | None = None
    error_weights: list[Tensor] | None = None

    def __post_init__(self) -> None:
        for k, w in enumerate(self.weights):
            if w.shape != (self.sizes[k + 1], self.sizes[k]):
                raise ShapeError(f"weight {k} has shape {w.shape}, expected {(self.sizes[k + 1], self.sizes[k])}")
        if self.backward_weights is not None:
            for k, bw in enumerate(self.backward_weights):
                if bw.shape != self.weights[k].T.shape:
                    raise ShapeError(f"backward weight {k} has shape {bw.shape}, expected {self.weights[k].T.shape}")
        if self.error_weights is not None:
            for k, psi in enumerate(self.error_weights):
                n = self.sizes[k + 1]
                if psi.shape != (n, n):
                    raise ShapeError(f"error weight {k} has shape {psi.shape}, expected {(n, n)}")

    @classmethod
    def create(cls, sizes: Sequence[int], activation: ActivationKind | str = ActivationKind.TANH, seed: int = 0,
               variance: float | str = 0.05, backward_weights: str | None = None, error_weights: str | None = None,
               output_activation: ActivationKind | str = ActivationKind.IDENTITY) -> "HierarchicalPCNet":
        """Gaussian-initialised network.

        ``backward_weights`` is ``None``, ``"transpose"`` (start equal to W^T)
        or ``"random"``; ``error_weights`` is ``None``, ``"identity"`` or
        ``"random"``.
        """
        rng = make_rng(seed)
        sizes = list(sizes)
        vs = [layer_variance(variance, sizes[k]) for k in range(len(sizes) - 1)]
        ws = [gaussian_init((sizes[k + 1], sizes[k]), 0.0, vs[k], rng) for k in range(len(sizes) - 1)]
        bs = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
        bw = None
        if backward_weights == "transpose":
            bw = [w.T.copy() for w in ws]
        elif backward_weights == "random":
            bw = [gaussian_init(w.T.shape, 0.0, v, rng) for w, v in zip(ws, vs)]
        elif backward_weights is not None:
            raise DomainError(f"unknown backward weight init {backward_weights!r}")
        ew = None
        if error_weights == "identity":
            ew = [np.eye(n) for n in sizes[1:]]
        elif error_weights == "random":
            ew = [gaussian_init((n, n), 0.0, layer_variance(variance, n), rng) for n in sizes[1:]]
        elif error_weights is not None:
            raise DomainError(f"unknown error weight init {error_weights!r}")
        return cls(sizes, ws, bs, ActivationKind.parse(activation), ActivationKind.parse(output_activation), bw, ew)

    @property
    def n_layers(self) -> int:
        return len(self.sizes)

    def layer_activation(self, k: int) -> ActivationKind:
        """Activation of the prediction made by layer k (the bottom one is the output)."""
        return self.output_activation if k == len(self.weights) - 1 else self.activation

    def copy(self) -> "HierarchicalPCNet":
        cp = lambda xs: None if xs is None else [x.copy() for x in xs]  # noqa: E731
        return replace(self, sizes=list(self.sizes), weights=cp(self.weights), biases=cp(self.biases),
                       backward_weights=cp(self.backward_weights), error_weights=cp(self.error_weights))

    def feedforward(self, x: Tensor) -> list[Tensor]:
        """Top-down prediction sweep from the top layer: equals the MLP forward pass."""
        mus = [np.asarray(x, dtype=np.float64)]
        for k, w in enumerate(self.weights):
            mus.append(activation_apply(self.layer_activation(k), mus[-1] @ w.T + self.biases[k]))
        return mus


@dataclass
class HierState:
    """Values and cached predictions for a hierarchical network (batch-leading)."""

    mus: list[Tensor]
    clamped: tuple[bool, ...]
    pre: list[Tensor] = field(default_factory=list)
    predictions: list[Tensor] = field(default_factory=list)
    errors: list[Tensor] = field(default_factory=list)
    precisions: list[Tensor | float] | None = None

    def as_pc_state(self) -> PCState:
        vals = {f"mu{k + 1}": self.mus[k + 1] for k in range(len(self.predictions))}
        preds = {f"mu{k + 1}": p for k, p in enumerate(self.predictions)}
        precs = {}
        if self.precisions is not None:
            precs = {f"mu{k + 1}": p for k, p in enumerate(self.precisions)}
        return PCState(vals, preds, precisions=precs)


def _refresh(net: HierarchicalPCNet, st: HierState) -> None:
    st.pre, st.predictions, st.errors = [], [], []
    for k, w in enumerate(net.weights):
        a = st.mus[k] @ w.T + net.biases[k]
        pred = activation_apply(net.layer_activation(k), a)
        below = st.mus[k + 1]
        if net.error_weights is not None:
            below = below @ net.error_weights[k].T
        prec = 1.0 if st.precisions is None else st.precisions[k]
        st.pre.append(a)
        st.predictions.append(pred)
        st.errors.append(prec * (below - pred))


def init_state(net: HierarchicalPCNet, top: Tensor, bottom: Tensor | None = None,
               precisions: list[Tensor | float] | None = None) -> HierState:
    """Feedforward initialisation; the top is clamped, and so is the bottom when given.

    Passing ``bottom=None`` gives the unsupervised mode in which only the top
    layer is fixed; a supervised run clamps both ends.
    """
    mus = net.feedforward(top)
    clamped = [True] + [False] * (net.n_layers - 1)
    if bottom is not None:
        mus[-1] = np.asarray(bottom, dtype=np.float64).copy()
        clamped[-1] = True
    st = HierState(mus, tuple(clamped), precisions=precisions)
    _refresh(net, st)
    return st


def _deriv(net: HierarchicalPCNet, k: int, st: HierState, config: PCConfig) -> Tensor | float:
    if config.drop_nonlinear_derivs:
        return 1.0
    return activation_deriv(net.layer_activation(k), st.pre[k])


def value_directions(net: HierarchicalPCNet, st: HierState, config: PCConfig) -> list[Tensor | None]:
    """``dmu_k = -eps_k + B_k (eps_{k+1} * f'_k)`` for every unclamped layer.

    ``B_k`` is ``W_k^T`` or the learned backward weights; ``eps_k`` is the
    error of layer k itself (absent for the top layer).
    """
    use_bw = config.learnable_backward_weights and net.backward_weights is not None
    dirs: list[Tensor | None] = []
    for k in range(net.n_layers):
        if st.clamped[k]:
            dirs.append(None)
            continue
        d = -st.errors[k - 1] if k >= 1 else np.zeros_like(st.mus[k])
        if k < len(net.weights):
            g = st.errors[k] * _deriv(net, k, st, config)
            d = d + (g @ net.backward_weights[k].T if use_bw else g @ net.weights[k])
        dirs.append(d)
    return dirs


def pc_infer_step(net: HierarchicalPCNet, state: HierState, config: PCConfig) -> HierState:
    """One simultaneous Euler step on all unclamped layers (in place; also returned)."""
    dirs = value_directions(net, state, config)
    for k, d in enumerate(dirs):
        if d is not None:
            state.mus[k] = state.mus[k] + config.inference_rate * d
    _refresh(net, state)
    return state


def pc_infer(net: HierarchicalPCNet, state: HierState, config: PCConfig,
             on_step: Callable[[int, HierState], None] | None = None) -> tuple[HierState, int, float]:
    """Relax until the largest value direction drops below tolerance or the budget ends."""
    residual = np.inf
    for it in range(config.inference_iters + 1):
        dirs = value_directions(net, state, config)
        residual = max((float(np.max(np.abs(d))) for d in dirs if d is not None), default=0.0)
        if residual < config.convergence_tol or it == config.inference_iters:
            return state, it, residual
        for k, d in enumerate(dirs):
            if d is not None:
                state.mus[k] = state.mus[k] + config.inference_rate * d
        _refresh(net, state)
        if on_step is not None:
            on_step(it, state)
    return state, config.inference_iters, residual


def pc_weight_gradients(net: HierarchicalPCNet, state: HierState, config: PCConfig) -> dict[str, list[Tensor]]:
    """Batch-averaged local updates (ascent directions on -F) for every weight family."""
    n = state.mus[0].shape[0]
    dW, db, dB, dpsi = [], [], [], []
    for k in range(len(net.weights)):
        g = state.errors[k] * _deriv(net, k, state, config)
        dW.append(g.T @ state.mus[k] / n)
        db.append(g.sum(axis=0) / n)
        dB.append(state.mus[k].T @ g / n)
        if net.error_weights is not None:
            dpsi.append(-(state.errors[k].T @ state.mus[k + 1]) / n)
    return {"weights": dW, "biases": db, "backward_weights": dB, "error_weights": dpsi}


def pc_weight_step(net: HierarchicalPCNet, state: HierState, config: PCConfig) -> HierarchicalPCNet:
    """Apply one learning step to every enabled weight family (in place; also returned).

    ``dW_k = (eps_{k+1} * f'_k) mu_k^T``; backward weights receive the
    transpose of the same product; error weights follow ``dpsi = -eps mu^T``.
    """
    grads = pc_weight_gradients(net, state, config)
    lr = config.weight_rate
    for k in range(len(net.weights)):
        net.weights[k] += lr * grads["weights"][k]
        net.biases[k] += lr * grads["biases"][k]
        if net.backward_weights is not None and config.learnable_backward_weights:
            net.backward_weights[k] += lr * grads["backward_weights"][k]
        if net.error_weights is not None and config.error_connection_weights:
            net.error_weights[k] += lr * grads["error_weights"][k]
    return net


def hierarchical_vfe(state: HierState) -> float:
    """Free energy of a hierarchical state: sum over layers of eps^T Pi^-1 eps."""
    total = 0.0
    for k, e in enumerate(state.errors):
        prec = 1.0 if state.precisions is None else state.precisions[k]
        total += float(np.sum(e * e / prec))
    return total


# ----------------------------------------------------------------------------
# Dynamical predictive coding in generalized coordinates.
# ----------------------------------------------------------------------------


def shift_operator(orders: Sequence[Tensor]) -> list[Tensor]:
    """D: order k takes the value of order k+1; the top order maps to zero."""
    return [orders[k + 1] for k in range(len(orders) - 1)] + [np.zeros_like(orders[-1])]


@dataclass
class GenCoordState:
    """Beliefs over generalized coordinates of a linear dynamical model.

    ``orders[k]`` is the belief about the k-th time derivative of the latent
    state. ``obs_weights[k]`` maps order k to observation order k and
    ``dyn_weights[k]`` predicts order k+1 from order k. Precisions are
    diagonal and block-diagonal across orders. ``prior_mean`` optionally
    anchors order 0 (the hierarchical prior from a level above).
    """

    orders: list[Tensor]
    obs_weights: list[Tensor]
    dyn_weights: list[Tensor]
    obs_precisions: list[Tensor | float] | None = None
    dyn_precisions: list[Tensor | float] | None = None
    prior_mean: Tensor | None = None
    prior_precision: Tensor | float = 1.0

    def __post_init__(self) -> None:
        d = self.orders[0].shape
        if any(o.shape != d for o in self.orders):
            raise ShapeError("all generalized orders must share one dimension")
        if len(self.obs_weights) != len(self.orders):
            raise ShapeError(f"{len(self.obs_weights)} observation weights for {len(self.orders)} orders")
        if len(self.dyn_weights) != len(self.orders) - 1:
            raise ShapeError(f"{len(self.dyn_weights)} dynamics weights for {len(self.orders)} orders")

    @classmethod
    def create(cls, n_orders: int, latent: int, obs: int, seed: int = 0, variance: float = 0.05,
               shared: bool = True) -> "GenCoordState":
        rng = make_rng(seed)
        w_obs = gaussian_init((obs, latent), 0.0, variance, rng)
        w_dyn = gaussian_init((latent, latent), 0.0, variance, rng)
        obs_w = [w_obs if shared else w_obs.copy() for _ in range(n_orders)]
        dyn_w = [w_dyn if shared else w_dyn.copy() for _ in range(n_orders - 1)]
        return cls([np.zeros(latent) for _ in range(n_orders)], obs_w, dyn_w)

    def copy(self) -> "GenCoordState":
        return replace(self, orders=[o.copy() for o in self.orders])

    def _op(self, k):
        return 1.0 if self.obs_precisions is None else self.obs_precisions[k]

    def _dp(self, k):
        return 1.0 if self.dyn_precisions is None else self.dyn_precisions[k]


@dataclass(frozen=True)
class DynConfig:
    inference_rate: float = 0.1
    dt: float = 0.0
    inner_iters: int = 1
    weight_rate: float = 0.0


def gen_errors(state: GenCoordState, observation: Sequence[Tensor]):
    """Observation errors for the observed orders and dynamics errors between orders."""
    if len(observation) > len(state.orders):
        raise ShapeError(f"{len(observation)} observation orders for a {len(state.orders)}-order state")
    eo = [state._op(k) * (np.asarray(observation[k]) - state.obs_weights[k] @ state.orders[k])
          for k in range(len(observation))]
    ex = [state._dp(k) * (state.orders[k + 1] - state.dyn_weights[k] @ state.orders[k])
          for k in range(len(state.orders) - 1)]
    ep = None
    if state.prior_mean is not None:
        ep = state.prior_precision * (state.orders[0] - state.prior_mean)
    return eo, ex, ep


def gen_free_energy(state: GenCoordState, observation: Sequence[Tensor]) -> float:
    eo, ex, ep = gen_errors(state, observation)
    total = 0.0
    for k, e in enumerate(eo):
        total += float(np.sum(e * e / state._op(k)))
    for k, e in enumerate(ex):
        total += float(np.sum(e * e / state._dp(k)))
    if ep is not None:
        total += float(np.sum(ep * ep / state.prior_precision))
    return total


def gen_gradient_direction(state: GenCoordState, observation: Sequence[Tensor]) -> list[Tensor]:
    """``-dF/dmu~`` (halved): the error-driven force on every order."""
    eo, ex, ep = gen_errors(state, observation)
    dirs = [np.zeros_like(o) for o in state.orders]
    for k, e in enumerate(eo):
        dirs[k] += state.obs_weights[k].T @ e
    for k, e in enumerate(ex):
        dirs[k] += state.dyn_weights[k].T @ e
        dirs[k + 1] -= e
    if ep is not None:
        dirs[0] -= ep
    return dirs


def dynamical_pc_step(state: GenCoordState, observation: Sequence[Tensor], config: DynConfig = DynConfig()) -> GenCoordState:
    """Advance beliefs by one observation.

    The prior-motion term ``dt * D mu~`` moves each order by the belief in the
    next one; then ``inner_iters`` Euler steps of size ``inference_rate``
    follow the error forces. With ``inner_iters=1`` and ``dt=0`` this is a
    single hierarchical PC step. If ``weight_rate > 0`` the observation and
    dynamics weights take one Hebbian step afterwards.
    """
    if len(observation) > len(state.orders):
        raise ShapeError(f"{len(observation)} observation orders for a {len(state.orders)}-order state")
    new = state.copy()
    if config.dt:
        motion = shift_operator(new.orders)
        new.orders = [o + config.dt * m for o, m in zip(new.orders, motion)]
    for _ in range(config.inner_iters):
        dirs = gen_gradient_direction(new, observation)
        new.orders = [o + config.inference_rate * d for o, d in zip(new.orders, dirs)]
    if config.weight_rate > 0:
        gen_weight_step(new, observation, config.weight_rate)
    return new


def gen_weight_step(state: GenCoordState, observation: Sequence[Tensor], rate: float) -> GenCoordState:
    """Hebbian step: ``dW_obs += eps_o mu^T``, ``dW_dyn += eps_x mu^T`` summed over orders.

    Shared weight objects accumulate every order's contribution once.
    """
    eo, ex, _ = gen_errors(state, observation)
    seen: dict[int, Tensor] = {}
    for k, e in enumerate(eo):
        w = state.obs_weights[k]
        seen.setdefault(id(w), np.zeros_like(w))
        seen[id(w)] += np.outer(e, state.orders[k])
    for k, e in enumerate(ex):
        w = state.dyn_weights[k]
        seen.setdefault(id(w), np.zeros_like(w))
        seen[id(w)] += np.outer(e, state.orders[k])
    for w in list(state.obs_weights) + list(state.dyn_weights):
        if id(w) in seen:
            w += rate * seen.pop(id(w))
    return state


def predict_next_observation(state: GenCoordState, dt: float, order: int = 0) -> Tensor:
    """Taylor-extrapolate the beliefs by ``dt`` and map order ``order`` to observation space."""
    n = len(state.orders)
    mu = np.zeros_like(state.orders[order])
    fact = 1.0
    for j in range(order, n):
        if j > order:
            fact *= dt / (j - order)
        mu = mu + fact * state.orders[j]
    return state.obs_weights[order] @ mu


# ----------------------------------------------------------------------------
# Full-construct lattice: dynamical orders and hierarchical levels together.
# ----------------------------------------------------------------------------


@dataclass
class LatticeState:
    """Nodes ``mu[i][n]`` for level i and dynamical order n.

    Node (i, n) is predicted by ``f(F[i][n+1] @ mu[i][n+1]) + g(G[i+1][n] @ mu[i+1][n])``;
    a missing neighbour contributes nothing, and a node with no neighbour
    above it in either direction carries no error unit. ``F[i][n]`` maps
    order n to order n-1 at level i (``F[i][0]`` unused); ``G[i][n]`` maps
    level i to level i-1 at order n (``G[0][n]`` unused). ``clamped`` marks
    observed nodes.
    """

    mu: list[list[Tensor]]
    F: list[list[Tensor | None]]
    G: list[list[Tensor | None]]
    f_act: ActivationKind = ActivationKind.IDENTITY
    g_act: ActivationKind = ActivationKind.TANH
    clamped: set[tuple[int, int]] = field(default_factory=set)
    precisions: dict[tuple[int, int], Tensor | float] = field(default_factory=dict)

    @property
    def levels(self) -> int:
        return len(self.mu)

    @property
    def orders(self) -> int:
        return len(self.mu[0])

    def has_error(self, i: int, n: int) -> bool:
        return n + 1 < self.orders or i + 1 < self.levels

    def copy(self) -> "LatticeState":
        return replace(self, mu=[[m.copy() for m in row] for row in self.mu],
                       F=[[None if w is None else w.copy() for w in row] for row in self.F],
                       G=[[None if w is None else w.copy() for w in row] for row in self.G])

    @classmethod
    def create(cls, dims: Sequence[int], orders: int, seed: int = 0, variance: float = 0.05,
               f_act: ActivationKind | str = ActivationKind.IDENTITY,
               g_act: ActivationKind | str = ActivationKind.TANH) -> "LatticeState":
        rng = make_rng(seed)
        L = len(dims)
        mu = [[gaussian_init(dims[i], 0.0, 1.0, rng) for _ in range(orders)] for i in range(L)]
        F = [[None] + [gaussian_init((dims[i], dims[i]), 0.0, variance, rng) for _ in range(1, orders)]
             for i in range(L)]
        G = [[None] * orders] + [[gaussian_init((dims[i - 1], dims[i]), 0.0, variance, rng) for _ in range(orders)]
                                 for i in range(1, L)]
        return cls(mu, F, G, ActivationKind.parse(f_act), ActivationKind.parse(g_act))


def _lattice_terms(st: LatticeState):
    """Pre-activations and errors for every node that has an error unit."""
    pre_f, pre_g, err = {}, {}, {}
    for i in range(st.levels):
        for n in range(st.orders):
            if not st.has_error(i, n):
                continue
            pred = np.zeros_like(st.mu[i][n])
            if n + 1 < st.orders:
                pre_f[i, n] = st.F[i][n + 1] @ st.mu[i][n + 1]
                pred = pred + activation_apply(st.f_act, pre_f[i, n])
            if i + 1 < st.levels:
                pre_g[i, n] = st.G[i + 1][n] @ st.mu[i + 1][n]
                pred = pred + activation_apply(st.g_act, pre_g[i, n])
            err[i, n] = st.precisions.get((i, n), 1.0) * (st.mu[i][n] - pred)
    return pre_f, pre_g, err


def lattice_free_energy(st: LatticeState) -> float:
    _, _, err = _lattice_terms(st)
    return float(sum(np.sum(e * e / st.precisions.get(key, 1.0)) for key, e in err.items()))


def full_construct_directions(st: LatticeState) -> dict[tuple[int, int], Tensor]:
    """Four contributions per node: its own error, the dynamical child's, the hierarchical child's."""
    pre_f, pre_g, err = _lattice_terms(st)
    dirs = {}
    for i in range(st.levels):
        for n in range(st.orders):
            d = -err[i, n] if (i, n) in err else np.zeros_like(st.mu[i][n])
            if n >= 1 and (i, n - 1) in pre_f:  # this node predicts order n-1 at its level
                d = d + st.F[i][n].T @ (err[i, n - 1] * activation_deriv(st.f_act, pre_f[i, n - 1]))
            if i >= 1 and (i - 1, n) in pre_g:  # this node predicts level i-1 at its order
                d = d + st.G[i][n].T @ (err[i - 1, n] * activation_deriv(st.g_act, pre_g[i - 1, n]))
            dirs[i, n] = d
    return dirs


def full_construct_step(st: LatticeState, config: PCConfig = PCConfig()) -> LatticeState:
    """One simultaneous Euler step on every unclamped lattice node."""
    dirs = full_construct_directions(st)
    new = st.copy()
    for (i, n), d in dirs.items():
        if (i, n) not in st.clamped:
            new.mu[i][n] = st.mu[i][n] + config.inference_rate * d
    return new


def full_construct_weight_step(st: LatticeState, rate: float) -> LatticeState:
    """Hebbian step on F and G: (error * derivative) outer (presynaptic node)."""
    pre_f, pre_g, err = _lattice_terms(st)
    new = st.copy()
    for (i, n), a in pre_f.items():
        new.F[i][n + 1] += rate * np.outer(err[i, n] * activation_deriv(st.f_act, a), st.mu[i][n + 1])
    for (i, n), a in pre_g.items():
        new.G[i + 1][n] += rate * np.outer(err[i, n] * activation_deriv(st.g_act, a), st.mu[i + 1][n])
    return new


# ----------------------------------------------------------------------------
# Laplace approximation.
# ----------------------------------------------------------------------------


def laplace_optimal_variance(hessian: Tensor) -> Tensor:
    """Optimal variational covariance under the Laplace approximation: the inverse Hessian.

    ``hessian`` is the curvature of the negative log joint at the mode and
    must be symmetric positive definite.
    """
    H = as_tensor(hessian, name="hessian")
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeError(f"hessian must be square, got {H.shape}")
    if not np.allclose(H, H.T, rtol=1e-12, atol=1e-12 * max(1.0, float(np.max(np.abs(H))))):
        raise DomainError("hessian is not symmetric")
    try:
        chol = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise DomainError("hessian is not positive definite") from exc
    inv_chol = np.linalg.solve(chol, np.eye(H.shape[0]))
    return inv_chol.T @ inv_chol


def laplace_free_energy(energy: Callable[[Tensor], float], hessian: Callable[[Tensor], Tensor],
                        mu: Tensor, sigma: Tensor) -> float:
    """``E(mu) + 0.5 tr(H(mu) sigma) - 0.5 ln det sigma`` (constants dropped)."""
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise DomainError("sigma must be positive definite")
    return float(energy(mu) + 0.5 * np.trace(hessian(mu) @ sigma) - 0.5 * logdet)
