"""Dense numerical substrate shared by every algorithm module.

Tensors are ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here enforce that contract, provide the activation
functions with their derivatives, seeded Gaussian initialisation, a central
finite-difference oracle and the gradient-angle metric.
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray


class FreegradError(Exception):
    """Base class for all library errors."""


class ShapeError(FreegradError, ValueError):
    """Raised when tensor shapes are not conformable."""


class EvaluationError(FreegradError, ArithmeticError):
    """Raised when a function returns a non-finite value during evaluation."""


class UndefinedAngleError(FreegradError, ValueError):
    """Raised when an angle is requested against a zero-norm vector."""


class DomainError(FreegradError, ValueError):
    """Raised when an input lies outside the mathematical domain of an operation."""


class DivergenceError(FreegradError, ArithmeticError):
    """Raised when an iterative scheme blows up past its guard threshold."""


def as_tensor(x, *, name: str = "tensor") -> Tensor:
    """Return ``x`` as a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{name} contains non-finite values")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product with a shape error that names both operands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


class ActivationKind(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"

    @classmethod
    def parse(cls, value: "ActivationKind | str") -> "ActivationKind":
        return value if isinstance(value, cls) else cls(str(value).lower())


def _sigmoid(x: Tensor) -> Tensor:
    # Split by sign so that exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_apply(kind: ActivationKind | str, x: Tensor) -> Tensor:
    """Elementwise f(x)."""
    kind = ActivationKind.parse(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.IDENTITY:
        return x.copy()
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    return _sigmoid(x)


def activation_deriv(kind: ActivationKind | str, x: Tensor) -> Tensor:
    """Elementwise f'(x). The relu derivative at exactly zero is 0."""
    kind = ActivationKind.parse(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.IDENTITY:
        return np.ones_like(x)
    if kind is ActivationKind.RELU:
        return (x > 0).astype(np.float64)
    if kind is ActivationKind.TANH:
        t = np.tanh(x)
        return 1.0 - t * t
    s = _sigmoid(x)
    return s * (1.0 - s)


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function.

    Component i is ``(f(x + h e_i) - f(x - h e_i)) / (2h)``.
    """
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite function value while perturbing component {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_angle(g1: Tensor, g2: Tensor) -> float:
    """Angle in degrees between two gradients, flattened to vectors."""
    a = np.asarray(g1, dtype=np.float64).reshape(-1)
    b = np.asarray(g2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"gradient shapes differ: {np.shape(g1)} vs {np.shape(g2)}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedAngleError("gradient angle is undefined for a zero-norm input")
    cos = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the seed is reduced to 64 bits."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


FAN_IN = "fan_in"


def layer_variance(variance: float | str, fan_in: int) -> float:
    """Resolve an init variance; the string ``"fan_in"`` means ``1 / fan_in``."""
    if variance == FAN_IN:
        return 1.0 / fan_in
    return float(variance)


def gaussian_init(shape: Sequence[int] | int, mean: float = 0.0, variance: float = 0.05,
                  seed: int | np.random.Generator = 0) -> Tensor:
    """I.i.d. normal draws with the given mean and variance.

    ``seed`` may be an integer (pure function of the arguments) or a live
    Generator when a caller wants to draw several tensors from one stream.
    """
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    return rng.normal(mean, math.sqrt(variance), size=shape)
