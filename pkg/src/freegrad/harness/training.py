"""Minibatch training loops shared by the MNIST experiments.

Every loop starts from a seeded initialisation, shuffles with a seeded
generator, and reports test accuracy after each epoch. Updates are
batch-mean SGD on the squared error to smoothed one-hot targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from ..arelax import (ARConfig, ARNet, ar_backward_weight_update, ar_forward, ar_relax, ar_weight_gradients,
                      ar_weight_update, mse_output_error)
from ..graph import ComputationGraph, build_mlp, forward, reverse_ad
from ..numcore import FAN_IN, DivergenceError, UndefinedAngleError, gradient_angle, make_rng
from ..pcnet import HierarchicalPCNet, PCConfig, init_state, pc_backprop, pc_infer, pc_weight_step
from .data import Dataset

MNIST_SIZES = (784, 300, 100, 10)
AR_SIZES = (784, 300, 300, 100, 10)


def accuracy(outputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(outputs, axis=1) == labels))


@dataclass
class TrainLog:
    """Per-epoch accuracy plus optional per-epoch and per-batch diagnostics."""

    accuracy: list[float] = field(default_factory=list)
    epoch_metrics: dict[str, list[float]] = field(default_factory=dict)
    batch_metrics: dict[str, list[float]] = field(default_factory=dict)
    diverged_at: int | None = None  # global batch index at which training blew up
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def add_epoch(self, name: str, value: float) -> None:
        self.epoch_metrics.setdefault(name, []).append(float(value))

    def add_batch(self, name: str, value: float) -> None:
        self.batch_metrics.setdefault(name, []).append(float(value))

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1] if self.accuracy else float("nan")


def _graph_layers(graph: ComputationGraph) -> list[str]:
    return sorted((n for n in graph.params if n.startswith("W")), key=lambda s: int(s[1:]))


def train_graph_mlp(train: Dataset, test: Dataset, method: str = "bp", sizes: Sequence[int] = MNIST_SIZES,
                    epochs: int = 10, batch_size: int = 64, lr: float = 0.1, seed: int = 0,
                    pc_config: PCConfig | None = None, activation: str = "relu") -> TrainLog:
    """Train a dense graph with reverse-mode gradients (``bp``) or predictive-coding equilibria (``pc``).

    In ``pc`` mode every batch also runs reverse-mode AD on the same
    parameters and logs the relative per-layer gradient divergence
    ``|g_pc - g_bp| / |g_bp|``.
    """
    if method not in ("bp", "pc"):
        raise ValueError(f"method must be 'bp' or 'pc', got {method!r}")
    graph = build_mlp(sizes, activation, seed=seed, variance=FAN_IN)
    cfg = pc_config or PCConfig(inference_rate=0.1, inference_iters=100, warn=False)
    layers = _graph_layers(graph)
    rng = make_rng(seed + 1)
    log = TrainLog()
    for _ in range(epochs):
        divs: dict[str, list[float]] = {w: [] for w in layers}
        for x, t, _ in train.batches(batch_size, rng):
            fwd = forward(graph, {"x": x})
            err = fwd.output - t
            ref = reverse_ad(graph, None, err, fwd=fwd)
            if method == "pc":
                grads = pc_backprop(graph, {"x": x}, err, cfg, fwd=fwd).tape.param_grads
                for w in layers:
                    den = np.linalg.norm(ref.param_grads[w])
                    if den > 0:
                        divs[w].append(float(np.linalg.norm(grads[w] - ref.param_grads[w]) / den))
            else:
                grads = ref.param_grads
            graph = graph.with_params({k: v - lr * grads[k] / len(x) for k, v in graph.params.items()})
        log.accuracy.append(accuracy(forward(graph, {"x": test.images}).output, test.labels))
        if method == "pc":
            for w in layers:
                log.add_epoch(f"divergence_{w}", float(np.mean(divs[w])) if divs[w] else 0.0)
    log.state = dict(graph.params)
    return log


HIERARCHICAL_VARIANTS = {
    "baseline": ({}, {}),
    "backward_weights": ({"backward_weights": "random"}, {"learnable_backward_weights": True}),
    "drop_derivs": ({}, {"drop_nonlinear_derivs": True}),
    "combined": ({"backward_weights": "random"}, {"learnable_backward_weights": True, "drop_nonlinear_derivs": True}),
}


def train_hierarchical(train: Dataset, test: Dataset, variant: str = "baseline",
                       sizes: Sequence[int] = MNIST_SIZES, epochs: int = 10, batch_size: int = 64,
                       weight_rate: float = 0.2, inference_rate: float = 0.1, inference_iters: int = 100,
                       seed: int = 0) -> TrainLog:
    """Supervised hierarchical PC: image clamped on top, label clamped at the bottom."""
    if variant not in HIERARCHICAL_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(HIERARCHICAL_VARIANTS)}")
    net_kw, cfg_kw = HIERARCHICAL_VARIANTS[variant]
    net = HierarchicalPCNet.create(sizes, "relu", seed=seed, variance=FAN_IN, **net_kw)
    cfg = PCConfig(inference_rate=inference_rate, inference_iters=inference_iters, weight_rate=weight_rate,
                   warn=False, **cfg_kw)
    rng = make_rng(seed + 1)
    log = TrainLog()
    for _ in range(epochs):
        for x, t, _ in train.batches(batch_size, rng):
            st, _, _ = pc_infer(net, init_state(net, x, t), cfg)
            pc_weight_step(net, st, cfg)
        log.accuracy.append(accuracy(net.feedforward(test.images)[-1], test.labels))
    log.state = {f"W{k}": w for k, w in enumerate(net.weights)}
    log.state.update({f"b{k}": b for k, b in enumerate(net.biases)})
    return log


AR_VARIANTS = {
    "unablated": {},
    "unfreeze_relax_deriv": {"unfreeze_relax_deriv": True},
    "unfreeze_weight_deriv": {"unfreeze_weight_deriv": True},
    "unfreeze_weight_activity": {"unfreeze_weight_activity": True},
    "drop_derivs": {"drop_nonlinear_derivs": True},
    "backward_weights": {"learnable_backward_weights": True},
    "combined": {"drop_nonlinear_derivs": True, "learnable_backward_weights": True},
}


@lru_cache(maxsize=8)
def _mlp_template(sizes: tuple[int, ...], activation: str) -> ComputationGraph:
    return build_mlp(sizes, activation, seed=0)


def ar_true_gradients(net: ARNet, x: np.ndarray, output_error: np.ndarray) -> list[np.ndarray]:
    """Reverse-mode parameter gradients of the same network built as a computation graph."""
    graph = _mlp_template(tuple(net.sizes), net.activation.value)
    params = {}
    for l in range(net.depth):
        params[f"W{l + 1}"] = net.W[l]
        params[f"b{l + 1}"] = net.b[l]
    graph = graph.with_params(params)
    tape = reverse_ad(graph, {"x": x}, output_error)
    out = []
    for l in range(net.depth):
        out += [tape.param_grads[f"W{l + 1}"], tape.param_grads[f"b{l + 1}"]]
    return out


def train_ar(train: Dataset, test: Dataset, variant: str = "unablated", sizes: Sequence[int] = AR_SIZES,
             epochs: int = 10, batch_size: int = 64, weight_rate: float = 0.1, relax_rate: float = 0.1,
             iterations: int = 100, seed: int = 0, log_angles: bool = True) -> TrainLog:
    """Activation-relaxation training; per batch, the angle between its update and the true gradient.

    An angle that cannot be formed (the update vanished) is logged as NaN.
    If relaxation blows up, training stops and ``diverged_at`` records the
    batch; the reported accuracy is that of the network at that point.
    """
    if variant not in AR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(AR_VARIANTS)}")
    cfg = ARConfig(relax_rate=relax_rate, iterations=iterations, weight_rate=weight_rate, **AR_VARIANTS[variant])
    net = ARNet.create(sizes, "relu", seed=seed, variance=FAN_IN)
    rng = make_rng(seed + 1)
    log = TrainLog()
    step = 0
    for _ in range(epochs):
        for x, t, _ in train.batches(batch_size, rng):
            ar_forward(net, x)
            err = mse_output_error(net, t)
            try:
                res = ar_relax(net, cfg, err)
            except DivergenceError:
                log.diverged_at = step
                break
            if log_angles:
                mine = [g for pair in ar_weight_gradients(net, res.activations, cfg) for g in pair]
                true = ar_true_gradients(net, x, err)
                try:
                    ang = gradient_angle(np.concatenate([g.ravel() for g in mine]),
                                         np.concatenate([g.ravel() for g in true]))
                except UndefinedAngleError:
                    ang = float("nan")
                log.add_batch("angle", ang)
            if cfg.learnable_backward_weights:
                ar_backward_weight_update(net, res.activations, cfg, 1.0 / len(x))
            ar_weight_update(net, res.activations, cfg, 1.0 / len(x))
            step += 1
        log.accuracy.append(accuracy(ar_forward(net, test.images)[-1], test.labels))
        if log.diverged_at is not None:
            break
    log.state = {f"W{l}": w for l, w in enumerate(net.W)}
    log.state.update({f"b{l}": b for l, b in enumerate(net.b)})
    return log
