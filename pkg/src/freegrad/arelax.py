"""Activation Relaxation and the direct three-factor scheme.

After a normal forward pass the activations themselves are relaxed with

    dx^l = -x^l + B^l (x^{l+1} * f'(W^l xbar^l))

where ``B^l`` is ``W^l^T`` (or learned backward weights ``psi^l``), the top
activation is held at the output gradient and ``xbar`` are the stored
feedforward activations. The fixed point of every hidden layer is the
backprop adjoint dL/dx^l. Batches are rows, so the products above appear
transposed in the code.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numcore import (
    layer_variance,
    ActivationKind,
    DivergenceError,
    DomainError,
    ShapeError,
    Tensor,
    activation_apply,
    activation_deriv,
    gaussian_init,
    make_rng,
)

DIVERGENCE_GUARD = 1e6


@dataclass(frozen=True)
class ARConfig:
    relax_rate: float = 0.1
    iterations: int = 100
    weight_rate: float = 0.01
    convergence_tol: float = 1e-7
    learnable_backward_weights: bool = False
    drop_nonlinear_derivs: bool = False
    unfreeze_relax_deriv: bool = False
    unfreeze_weight_deriv: bool = False
    unfreeze_weight_activity: bool = False

    def __post_init__(self) -> None:
        if not (self.relax_rate > 0 and self.weight_rate > 0):
            raise DomainError("ARConfig rates must be positive")


@dataclass
class ARNet:
    """Forward weights ``W[l]`` (n_{l+1} x n_l), biases, and backward weights ``psi[l]`` (n_l x n_{l+1})."""

    sizes: list[int]
    W: list[Tensor]
    b: list[Tensor]
    psi: list[Tensor]
    activation: ActivationKind = ActivationKind.RELU
    xbar: list[Tensor] = field(default_factory=list)
    pre: list[Tensor] = field(default_factory=list)

    def __post_init__(self) -> None:
        for l, (w, p) in enumerate(zip(self.W, self.psi)):
            if w.shape != (self.sizes[l + 1], self.sizes[l]):
                raise ShapeError(f"W[{l}] has shape {w.shape}, expected {(self.sizes[l + 1], self.sizes[l])}")
            if p.shape != w.T.shape:
                raise ShapeError(f"psi[{l}] has shape {p.shape}, expected {w.T.shape}")

    @classmethod
    def create(cls, sizes: Sequence[int], activation: ActivationKind | str = ActivationKind.RELU, seed: int = 0,
               variance: float | str = 0.05, psi_init: str = "random") -> "ARNet":
        """``psi_init`` is ``"random"`` (N(0, variance)) or ``"transpose"`` (start equal to W^T)."""
        rng = make_rng(seed)
        sizes = list(sizes)
        vs = [layer_variance(variance, sizes[l]) for l in range(len(sizes) - 1)]
        W = [gaussian_init((sizes[l + 1], sizes[l]), 0.0, vs[l], rng) for l in range(len(sizes) - 1)]
        if psi_init == "transpose":
            psi = [w.T.copy() for w in W]
        elif psi_init == "random":
            psi = [gaussian_init(w.T.shape, 0.0, v, rng) for w, v in zip(W, vs)]
        else:
            raise DomainError(f"unknown psi init {psi_init!r}")
        return cls(sizes, W, [np.zeros(sizes[l + 1]) for l in range(len(sizes) - 1)], psi,
                   ActivationKind.parse(activation))

    @property
    def depth(self) -> int:
        return len(self.W)

    def layer_activation(self, l: int) -> ActivationKind:
        return ActivationKind.IDENTITY if l == self.depth - 1 else self.activation

    def copy(self) -> "ARNet":
        return replace(self, sizes=list(self.sizes), W=[w.copy() for w in self.W], b=[x.copy() for x in self.b],
                       psi=[p.copy() for p in self.psi], xbar=[x.copy() for x in self.xbar],
                       pre=[a.copy() for a in self.pre])


def ar_forward(net: ARNet, x: Tensor) -> list[Tensor]:
    """Standard forward pass ``x^{l+1} = f(W^l x^l + b^l)`` with a linear output; stores ``xbar``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.sizes[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match first layer {net.sizes[0]}")
    xs, pres = [x], []
    for l in range(net.depth):
        a = xs[-1] @ net.W[l].T + net.b[l]
        pres.append(a)
        xs.append(activation_apply(net.layer_activation(l), a))
    for arr in xs + pres:
        arr.setflags(write=False)
    net.xbar, net.pre = xs, pres
    return xs


def _deriv(net: ARNet, l: int, x_current: Tensor | None, config: ARConfig, unfrozen: bool) -> Tensor | float:
    if config.drop_nonlinear_derivs:
        return 1.0
    kind = net.layer_activation(l)
    if kind is ActivationKind.IDENTITY:
        return 1.0
    if unfrozen and x_current is not None:
        return activation_deriv(kind, x_current @ net.W[l].T + net.b[l])
    return activation_deriv(kind, net.pre[l])


def _backward_map(net: ARNet, l: int, g: Tensor, config: ARConfig) -> Tensor:
    return g @ (net.psi[l].T if config.learnable_backward_weights else net.W[l])


@dataclass
class RelaxResult:
    activations: list[Tensor]
    iterations: int
    residual: float


def ar_relax(net: ARNet, config: ARConfig, output_error: Tensor, sequential: bool = False) -> RelaxResult:
    """Relax hidden activations toward the adjoints of the loss.

    ``output_error`` is dL/dx^L (``x^L - T`` for the squared error). Every
    hidden layer starts at its feedforward value and all layers move together
    from the previous iterate. The input layer carries no adjoint that any
    weight update needs, so it is not relaxed. ``sequential=True`` instead
    relaxes one layer at a time from the top down, each to tolerance.
    """
    if not net.xbar:
        raise DomainError("ar_relax needs a stored forward pass; call ar_forward first")
    L = net.depth
    eps = np.asarray(output_error, dtype=np.float64)
    if eps.shape != net.xbar[L].shape:
        raise ShapeError(f"output error {eps.shape} vs output {net.xbar[L].shape}")
    xs = [None] + [net.xbar[l].copy() for l in range(1, L)] + [eps.copy()]
    eta = config.relax_rate

    def direction(l: int) -> Tensor:
        g = xs[l + 1] * _deriv(net, l, xs[l], config, config.unfreeze_relax_deriv)
        return -xs[l] + _backward_map(net, l, g, config)

    if sequential:
        total, worst = 0, 0.0
        for l in range(L - 1, 0, -1):
            for it in range(max(config.iterations, 1) * 100):
                d = direction(l)
                res = float(np.max(np.abs(d)))
                if res < config.convergence_tol:
                    break
                xs[l] = xs[l] + eta * d
                _guard(xs[l], l)
            total += it
            worst = max(worst, res)
        return RelaxResult(xs, total, worst)

    residual = np.inf
    it = 0
    while True:
        dirs = {l: direction(l) for l in range(1, L)}
        residual = max((float(np.max(np.abs(d))) for d in dirs.values()), default=0.0)
        if residual < config.convergence_tol or it >= config.iterations:
            break
        for l, d in dirs.items():
            xs[l] = xs[l] + eta * d
            _guard(xs[l], l)
        it += 1
    return RelaxResult(xs, it, residual)


def _guard(x: Tensor, l: int) -> None:
    n = float(np.max(np.abs(x)))
    if not np.isfinite(n) or n > DIVERGENCE_GUARD:
        raise DivergenceError(f"activation relaxation diverged at layer {l} (max |x| = {n:.3e})")


def ar_weight_gradients(net: ARNet, activations: Sequence[Tensor], config: ARConfig) -> list[tuple[Tensor, Tensor]]:
    """Per-layer ``(dL/dW, dL/db)`` summed over the batch, from relaxed activations.

    ``dW^l = (x^{l+1} * f'(W^l xbar^l))^T xbar^l``. The ablation flags swap
    the stored values for the relaxed ones in the derivative or the
    presynaptic term.
    """
    grads = []
    for l in range(net.depth):
        current = activations[l] if l >= 1 else net.xbar[0]
        g = activations[l + 1] * _deriv(net, l, current, config, config.unfreeze_weight_deriv)
        pre_syn = current if config.unfreeze_weight_activity else net.xbar[l]
        grads.append((g.T @ pre_syn, g.sum(axis=0)))
    return grads


def ar_weight_update(net: ARNet, activations: Sequence[Tensor], config: ARConfig, scale: float = 1.0) -> ARNet:
    """Gradient step ``W <- W - eta * scale * dW`` on the forward weights (in place; also returned)."""
    for l, (gw, gb) in enumerate(ar_weight_gradients(net, activations, config)):
        net.W[l] -= config.weight_rate * scale * gw
        net.b[l] -= config.weight_rate * scale * gb
    return net


def ar_backward_weight_update(net: ARNet, activations: Sequence[Tensor], config: ARConfig, scale: float = 1.0) -> ARNet:
    """Hebbian step on psi: the transpose of the forward-weight product, same sign and rate.

    ``dpsi^l = xbar^l (x^{l+1} * f')^T``; starting from ``psi = W^T`` the two
    stay transposes of each other.
    """
    if not config.learnable_backward_weights:
        raise DomainError("backward weights are only learned when learnable_backward_weights is set")
    for l in range(net.depth):
        g = activations[l + 1] * _deriv(net, l, net.xbar[l], config, False)
        net.psi[l] -= config.weight_rate * scale * (net.xbar[l].T @ g)
    return net


def mse_output_error(net: ARNet, target: Tensor) -> Tensor:
    """dL/dx^L for L = 0.5 * ||x^L - T||^2."""
    return net.xbar[net.depth] - np.asarray(target, dtype=np.float64)


# ----------------------------------------------------------------------------
# Three-factor scheme: activation before the weights.
# ----------------------------------------------------------------------------


@dataclass
class ThreeFactorNet:
    """Layers ``x^l = W^l f(x^{l-1})``; ``psi[l]`` has the shape of ``W[l]^T``."""

    sizes: list[int]
    W: list[Tensor]
    psi: list[Tensor]
    activation: ActivationKind = ActivationKind.TANH
    input_activation: bool = True
    xs: list[Tensor] = field(default_factory=list)

    @classmethod
    def create(cls, sizes: Sequence[int], activation: ActivationKind | str = ActivationKind.TANH, seed: int = 0,
               variance: float | str = 0.05, psi_init: str = "random", input_activation: bool = True) -> "ThreeFactorNet":
        rng = make_rng(seed)
        sizes = list(sizes)
        vs = [layer_variance(variance, sizes[l]) for l in range(len(sizes) - 1)]
        W = [gaussian_init((sizes[l + 1], sizes[l]), 0.0, vs[l], rng) for l in range(len(sizes) - 1)]
        psi = ([w.T.copy() for w in W] if psi_init == "transpose"
               else [gaussian_init(w.T.shape, 0.0, v, rng) for w, v in zip(W, vs)])
        return cls(sizes, W, psi, ActivationKind.parse(activation), input_activation)

    def presyn(self, l: int, x: Tensor) -> Tensor:
        """f applied to layer l before it is sent through W[l]."""
        if l == 0 and not self.input_activation:
            return x
        return activation_apply(self.activation, x)

    def presyn_deriv(self, l: int, x: Tensor) -> Tensor | float:
        if l == 0 and not self.input_activation:
            return 1.0
        return activation_deriv(self.activation, x)


def three_factor_forward(net: ThreeFactorNet, x: Tensor) -> list[Tensor]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.sizes[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match first layer {net.sizes[0]}")
    xs = [x]
    for l, w in enumerate(net.W):
        xs.append(net.presyn(l, xs[-1]) @ w.T)
    net.xs = xs
    return xs


@dataclass
class ThreeFactorResult:
    adjoints: list[Tensor]
    weight_grads: list[Tensor]


def three_factor_backward(net: ThreeFactorNet, output_error: Tensor, use_psi: bool = False,
                          include_deriv: bool = True) -> ThreeFactorResult:
    """Interneuron adjoints ``I^l = (I^{l+1} B^l) * f'(x^l)`` and gradients ``dW^l = I^{l+1}^T f(x^l)``.

    ``B^l`` is ``W^l`` (exact transpose route, i.e. the chain rule) unless
    ``use_psi`` selects the learned backward weights. ``include_deriv=False``
    drops the presynaptic derivative.
    """
    if not net.xs:
        raise DomainError("three_factor_backward needs a stored forward pass")
    L = len(net.W)
    I = [None] * (L + 1)
    I[L] = np.asarray(output_error, dtype=np.float64)
    grads = [None] * L
    for l in range(L - 1, -1, -1):
        grads[l] = I[l + 1].T @ net.presyn(l, net.xs[l])
        back = I[l + 1] @ (net.psi[l].T if use_psi else net.W[l])
        I[l] = back * net.presyn_deriv(l, net.xs[l]) if include_deriv else back
    return ThreeFactorResult(I, grads)


def three_factor_psi_update(net: ThreeFactorNet, result: ThreeFactorResult, rate: float, scale: float = 1.0) -> None:
    """Keep psi tracking W^T by applying the transposed weight gradient."""
    for l in range(len(net.W)):
        net.psi[l] -= rate * scale * result.weight_grads[l].T
