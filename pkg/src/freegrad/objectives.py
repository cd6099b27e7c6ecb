"""Exact evaluation of the discrete objective family used for planning.

Conventions
-----------
* Conditional tables are stored with the conditioning variable on the
  columns: ``likelihood[o, x] = q(o | x)`` and ``posterior[x, o] = q(x | o)``.
  Every column sums to one.
* Expectations skip cells whose weight is exactly zero (``0 * log 0 = 0``).
  A zero probability inside a logarithm that carries positive weight is a
  genuine infinity and raises :class:`DomainError` naming the cell. Positive
  values are floored at ``LOG_FLOOR`` before taking logs.
* Desire distributions are written ``p~``. Rewards enter through the
  Boltzmann convention ``p~(o) ∝ exp(-r(o))``, so ``r`` behaves as a cost.

Besides the tabular functionals the module holds the tabular planner
(perception update and policy posterior by enumeration) and the
one-dimensional Gaussian-mixture fits that contrast evidence and divergence
objectives.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numcore import DomainError, ShapeError, Tensor, make_rng

LOG_FLOOR = 1e-300
NORM_TOL = 1e-10
MAX_ACTIONS = 4
MAX_HORIZON = 4


class EnumerationBudgetError(DomainError):
    """Raised when exhaustive policy enumeration would exceed the supported size."""


# ---------------------------------------------------------------------------
# distributions and logs


def _safe_log(p: Tensor, weight: Tensor, what: str) -> Tensor:
    """``log p`` on the support of ``weight``; zero elsewhere.

    Raises if ``p`` vanishes (or is negative) where ``weight`` is positive.
    """
    p = np.asarray(p, dtype=np.float64)
    weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), p.shape)
    live = weight > 0
    bad = live & (p <= 0)
    if np.any(bad):
        cell = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"log of zero probability in {what} at cell {cell}")
    out = np.zeros_like(p)
    out[live] = np.log(np.maximum(p[live], LOG_FLOOR))
    return out


def _expect(weight: Tensor, values: Tensor) -> float:
    weight = np.asarray(weight, dtype=np.float64)
    return float(np.sum(np.where(weight > 0, weight * values, 0.0)))


def _check_dist(p: Tensor, name: str, axis: int | None = None) -> Tensor:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError(f"{name} has negative or non-finite entries")
    sums = p.sum() if axis is None else p.sum(axis=axis)
    if np.max(np.abs(sums - 1.0)) > NORM_TOL:
        raise DomainError(f"{name} does not sum to one (max deviation {np.max(np.abs(sums - 1.0)):.3e})")
    return p


@dataclass(frozen=True)
class DiscreteDist:
    """A categorical distribution, or a conditional table whose columns are distributions."""

    probs: Tensor

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim not in (1, 2):
            raise ShapeError(f"expected a vector or a conditional table, got shape {p.shape}")
        _check_dist(p, "distribution", axis=None if p.ndim == 1 else 0)
        object.__setattr__(self, "probs", p)

    def entropy(self) -> float | Tensor:
        """Entropy of the vector, or the per-column entropies of a table."""
        p = self.probs
        return -np.sum(np.where(p > 0, p * np.log(np.maximum(p, LOG_FLOOR)), 0.0), axis=0)

    def kl(self, other: "DiscreteDist | Tensor") -> float:
        return kl_divergence(self.probs, other.probs if isinstance(other, DiscreteDist) else other)


def _probs(x: DiscreteDist | Tensor) -> Tensor:
    return x.probs if isinstance(x, DiscreteDist) else np.asarray(x, dtype=np.float64)


def entropy(p: DiscreteDist | Tensor) -> float:
    p = _probs(p)
    return -_expect(p, _safe_log(p, p, "entropy"))


def kl_divergence(p: DiscreteDist | Tensor, q: DiscreteDist | Tensor) -> float:
    """KL[p || q] for vectors or tables of matching shape, summed over all cells."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ShapeError(f"KL between shapes {p.shape} and {q.shape}")
    return _expect(p, _safe_log(p, p, "KL first argument") - _safe_log(q, p, "KL second argument"))


def softmax(v: Tensor) -> Tensor:
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - np.max(v))
    return z / z.sum()


def boltzmann_desire(costs: Tensor) -> Tensor:
    """Desire vector ``p~ ∝ exp(-r)`` from per-outcome costs ``r``."""
    return softmax(-np.asarray(costs, dtype=np.float64))


# ---------------------------------------------------------------------------
# one-step model and its functionals


@dataclass
class DiscreteModel:
    """Prior, likelihood and desire for a single future step.

    Exactly one desire encoding is active, chosen by which fields are set:
    ``joint_desire[o, x]`` if given; otherwise ``desire_obs`` (the biased
    joint is ``p~(o) q(x|o)`` with exact Bayes ``q(x|o)``); otherwise
    ``desire_state`` (the biased joint is ``p~(x) q(o|x)``).

    ``posterior`` is the agent's ``q(x|o)``; it defaults to exact Bayes.
    """

    prior: Tensor
    likelihood: Tensor
    desire_obs: Tensor | None = None
    desire_state: Tensor | None = None
    joint_desire: Tensor | None = None
    posterior: Tensor | None = None

    def __post_init__(self) -> None:
        self.prior = _check_dist(self.prior, "prior")
        self.likelihood = _check_dist(self.likelihood, "likelihood", axis=0)
        n_obs, n_states = self.likelihood.shape
        if self.prior.shape != (n_states,):
            raise ShapeError(f"prior {self.prior.shape} does not match likelihood {self.likelihood.shape}")
        if self.desire_obs is not None:
            self.desire_obs = _check_dist(self.desire_obs, "observation desire")
            if self.desire_obs.shape != (n_obs,):
                raise ShapeError(f"observation desire {self.desire_obs.shape} expected ({n_obs},)")
        if self.desire_state is not None:
            self.desire_state = _check_dist(self.desire_state, "state desire")
            if self.desire_state.shape != (n_states,):
                raise ShapeError(f"state desire {self.desire_state.shape} expected ({n_states},)")
        if self.joint_desire is not None:
            self.joint_desire = _check_dist(self.joint_desire, "joint desire")
            if self.joint_desire.shape != (n_obs, n_states):
                raise ShapeError(f"joint desire {self.joint_desire.shape} expected {(n_obs, n_states)}")
        if self.joint_desire is None and self.desire_obs is None and self.desire_state is None:
            raise DomainError("a desire distribution (observation, state or joint) is required")
        if self.posterior is not None:
            self.posterior = np.asarray(self.posterior, dtype=np.float64)
            if self.posterior.shape != (n_states, n_obs):
                raise ShapeError(f"posterior {self.posterior.shape} expected {(n_states, n_obs)}")
            _check_dist(self.posterior, "posterior", axis=0)

    @property
    def desire_mode(self) -> str:
        if self.joint_desire is not None:
            return "joint"
        return "observation" if self.desire_obs is not None else "state"

    @property
    def n_states(self) -> int:
        return self.prior.shape[0]

    @property
    def n_obs(self) -> int:
        return self.likelihood.shape[0]

    def predicted_obs(self) -> Tensor:
        """``q(o) = sum_x q(o|x) q(x)``."""
        return self.likelihood @ self.prior

    def exact_posterior(self) -> Tensor:
        """Bayes posterior table ``[x, o]``; columns for impossible observations are left uniform."""
        joint = self.likelihood * self.prior[None, :]  # [o, x]
        qo = joint.sum(axis=1)
        post = np.full((self.n_states, self.n_obs), 1.0 / self.n_states)
        live = qo > 0
        post[:, live] = (joint[live] / qo[live, None]).T
        return post

    def agent_posterior(self) -> Tensor:
        return self.exact_posterior() if self.posterior is None else self.posterior

    def joint(self) -> Tensor:
        """Expectation weights ``q(o, x) = q(x|o) q(o)`` as an ``[o, x]`` table."""
        return self.agent_posterior().T * self.predicted_obs()[:, None]

    def generative_joint(self) -> Tensor:
        """``q(o|x) q(x)`` as an ``[o, x]`` table."""
        return self.likelihood * self.prior[None, :]

    def biased_joint(self) -> Tensor:
        """The desired joint ``p~(o, x)`` as an ``[o, x]`` table."""
        if self.joint_desire is not None:
            return self.joint_desire
        if self.desire_obs is not None:
            return self.exact_posterior().T * self.desire_obs[:, None]
        return self.likelihood * self.desire_state[None, :]


def fef(model: DiscreteModel) -> float:
    """``E_q(o,x)[ln q(x|o) - ln p~(o,x)]``."""
    w = model.joint()
    post = model.agent_posterior().T
    return _expect(w, _safe_log(post, w, "posterior q(x|o)") - _safe_log(model.biased_joint(), w, "desired joint"))


def efe(model: DiscreteModel) -> float:
    """``E_q(o,x)[ln q(x) - ln p~(o,x)]``."""
    w = model.joint()
    prior = np.broadcast_to(model.prior[None, :], w.shape)
    return _expect(w, _safe_log(prior, w, "prior q(x)") - _safe_log(model.biased_joint(), w, "desired joint"))


def feef(model: DiscreteModel) -> float:
    """``KL[q(o|x) q(x) || p~(o, x)]``."""
    return kl_divergence(model.generative_joint(), model.biased_joint())


def information_gain(model: DiscreteModel) -> float:
    """``E_q(o) KL[q(x|o) || q(x)]`` using the agent posterior."""
    qo = model.predicted_obs()
    post = model.agent_posterior()
    return float(sum(qo[o] * kl_divergence(post[:, o], model.prior) for o in range(model.n_obs) if qo[o] > 0))


def expected_log_desire(model: DiscreteModel) -> float:
    """``E_q(o) ln p~(o)`` where ``p~(o)`` is the observation marginal of the desired joint."""
    qo = model.predicted_obs()
    return _expect(qo, _safe_log(model.biased_joint().sum(axis=1), qo, "desired observation marginal"))


def posterior_divergence(model: DiscreteModel) -> float:
    """``E_q(o) KL[q(x|o) || p~(x|o)]``: zero when the agent posterior is the desired conditional."""
    qo = model.predicted_obs()
    pj = model.biased_joint()
    po = pj.sum(axis=1)
    post = model.agent_posterior()
    total = 0.0
    for o in range(model.n_obs):
        if qo[o] <= 0:
            continue
        if po[o] <= 0:
            raise DomainError(f"desired observation marginal is zero at cell ({o},)")
        total += qo[o] * kl_divergence(post[:, o], pj[o] / po[o])
    return float(total)


def efe_decomposition(model: DiscreteModel) -> dict[str, float]:
    """EFE with its three exact components and the identity residual.

    ``efe = -E ln p~(o) - info_gain + posterior_divergence``.
    """
    value = efe(model)
    ext = -expected_log_desire(model)
    ig = information_gain(model)
    pd = posterior_divergence(model)
    return {"efe": value, "extrinsic": ext, "info_gain": ig, "posterior_divergence": pd,
            "residual": value - (ext - ig + pd)}


def risk_ambiguity(model: DiscreteModel) -> tuple[float, float]:
    """State-desire form: risk ``KL[q(x) || p~(x)]`` and ambiguity ``E_q(x) H[q(o|x)]``."""
    if model.desire_state is None:
        raise DomainError("risk/ambiguity form needs a state desire")
    risk = kl_divergence(model.prior, model.desire_state)
    amb = float(np.dot(model.prior, DiscreteDist(model.likelihood).entropy()))
    return risk, amb


def efe_fef_ig_identity(model: DiscreteModel) -> tuple[float, float, float, float]:
    """Returns ``(efe, fef, ig, residual)`` with ``residual = efe - (fef - ig)``."""
    e, f, ig = efe(model), fef(model), information_gain(model)
    return e, f, ig, e - (f - ig)


def likelihood_log_expectation(model: DiscreteModel) -> float:
    """``E_q(o|x)q(x) ln q(o|x)`` (the negative expected likelihood entropy)."""
    w = model.generative_joint()
    return _expect(w, _safe_log(model.likelihood, w, "likelihood"))


def evidence_objective(model: DiscreteModel) -> float:
    """``E_q(o) ln p~(o)``, the quantity an evidence objective maximises."""
    return expected_log_desire(model)


def divergence_objective(model: DiscreteModel) -> float:
    """``KL[q(o) || p~(o)]``, the quantity a divergence objective minimises."""
    return kl_divergence(model.predicted_obs(), model.biased_joint().sum(axis=1))


def entropy_decomposition(model: DiscreteModel) -> tuple[float, float, float, float]:
    """``H[q(o)] = E_q(x) H[q(o|x)] + I(o; x)`` with the exact posterior.

    Returns ``(marginal_entropy, expected_likelihood_entropy, info_gain, residual)``.
    """
    h = entropy(model.predicted_obs())
    lik = float(np.dot(model.prior, DiscreteDist(model.likelihood).entropy()))
    exact = DiscreteModel(model.prior, model.likelihood, model.desire_obs, model.desire_state,
                          model.joint_desire, posterior=None)
    ig = information_gain(exact)
    return h, lik, ig, h - (lik + ig)


def cai_maxent_objective(action_rewards: Tensor, policy: DiscreteDist | Tensor,
                         prior_policy: DiscreteDist | Tensor | None = None) -> dict[str, float]:
    """Expected reward minus the action divergence ``KL[policy || prior]``.

    With a uniform prior the divergence equals ``ln|A| - H[policy]``; the
    returned dictionary carries the objective, its pieces and that constant.
    """
    r = np.asarray(action_rewards, dtype=np.float64)
    pi = _check_dist(_probs(policy), "policy")
    if pi.shape != r.shape:
        raise ShapeError(f"policy {pi.shape} and rewards {r.shape} differ")
    prior = np.full_like(pi, 1.0 / pi.size) if prior_policy is None else _check_dist(_probs(prior_policy), "prior policy")
    expected = float(np.dot(pi, r))
    div = kl_divergence(pi, prior)
    return {"objective": expected - div, "expected_reward": expected, "action_divergence": div,
            "policy_entropy": entropy(pi), "log_actions": math.log(pi.size)}


def random_discrete_model(seed: int | np.random.Generator, n_states: int, n_obs: int,
                          desire: str = "observation", concentration: float = 1.0,
                          exact_posterior: bool = True) -> DiscreteModel:
    """Dirichlet-random model for identity sweeps."""
    rng = make_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    alpha = concentration
    prior = rng.dirichlet(np.full(n_states, alpha))
    lik = rng.dirichlet(np.full(n_obs, alpha), size=n_states).T
    kwargs: dict = {}
    if desire == "observation":
        kwargs["desire_obs"] = rng.dirichlet(np.full(n_obs, alpha))
    elif desire == "state":
        kwargs["desire_state"] = rng.dirichlet(np.full(n_states, alpha))
    elif desire == "joint":
        kwargs["joint_desire"] = rng.dirichlet(np.full(n_obs * n_states, alpha)).reshape(n_obs, n_states)
    else:
        raise DomainError(f"unknown desire encoding {desire!r}")
    if not exact_posterior:
        kwargs["posterior"] = rng.dirichlet(np.full(n_states, alpha), size=n_obs).T
    # Dirichlet draws can underflow to exact zeros for tiny concentrations.
    for key in ("desire_obs", "desire_state", "joint_desire"):
        if key in kwargs:
            v = np.maximum(kwargs[key], 1e-12)
            kwargs[key] = v / v.sum()
    prior = np.maximum(prior, 1e-12)
    lik = np.maximum(lik, 1e-12)
    return DiscreteModel(prior / prior.sum(), lik / lik.sum(axis=0), **kwargs)


# ---------------------------------------------------------------------------
# tabular active inference


@dataclass
class TabularPOMDP:
    """``A[o, x] = p(o|x)``, ``B[a][x', x] = p(x'|x, a)``, desire ``C[o]``, horizon ``T``, precision ``gamma``."""

    A: Tensor
    B: Tensor
    C: Tensor
    T: int = 1
    gamma: float = 1.0

    def __post_init__(self) -> None:
        self.A = _check_dist(self.A, "A", axis=0)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim == 2:
            self.B = self.B[None]
        n_obs, n_states = self.A.shape
        if self.B.shape[1:] != (n_states, n_states):
            raise ShapeError(f"B {self.B.shape} expected (n_actions, {n_states}, {n_states})")
        for a in range(self.B.shape[0]):
            _check_dist(self.B[a], f"B[{a}]", axis=0)
        self.C = _check_dist(self.C, "C")
        if self.C.shape != (n_obs,):
            raise ShapeError(f"C {self.C.shape} expected ({n_obs},)")
        if self.T < 1:
            raise DomainError("horizon T must be >= 1")
        if self.gamma < 0:
            raise DomainError("policy precision must be non-negative")

    @property
    def n_actions(self) -> int:
        return self.B.shape[0]

    def policies(self) -> list[tuple[int, ...]]:
        if self.n_actions > MAX_ACTIONS or self.T > MAX_HORIZON:
            raise EnumerationBudgetError(
                f"{self.n_actions}^{self.T} policies exceeds the enumeration budget "
                f"(|A| <= {MAX_ACTIONS}, T <= {MAX_HORIZON})")
        return list(itertools.product(range(self.n_actions), repeat=self.T))


def _observation_check(pomdp: TabularPOMDP, observation: int) -> None:
    if not 0 <= int(observation) < pomdp.A.shape[0]:
        raise DomainError(f"observation index {observation} out of range [0, {pomdp.A.shape[0]})")


def ai_perception_update(pomdp: TabularPOMDP, observation: int, prior: DiscreteDist | Tensor,
                         action: int = 0) -> Tensor:
    """Single-step posterior ``softmax(ln A[o, :] + ln(B_a prior))``."""
    _observation_check(pomdp, observation)
    predicted = pomdp.B[action] @ _check_dist(_probs(prior), "prior belief")
    unnorm = pomdp.A[observation] * predicted
    if unnorm.sum() <= 0:
        raise DomainError(f"observation {observation} has zero probability under the predicted belief")
    live = unnorm > 0
    logits = np.full_like(unnorm, -np.inf)
    logits[live] = np.log(np.maximum(pomdp.A[observation][live], LOG_FLOOR)) + np.log(np.maximum(predicted[live], LOG_FLOOR))
    return softmax(logits)


def perception_iterate(pomdp: TabularPOMDP, observation: int, prior: DiscreteDist | Tensor,
                       init: Tensor, steps: int = 50, rate: float = 0.5, action: int = 0) -> list[Tensor]:
    """Gradient flow on log-beliefs ``v += rate * (ln A[o] + ln(B prior) - v)`` from ``softmax(v) = init``.

    Returns the belief after every step; the fixed point is the Bayes posterior.
    """
    _observation_check(pomdp, observation)
    predicted = pomdp.B[action] @ _check_dist(_probs(prior), "prior belief")
    target = _safe_log(pomdp.A[observation], np.ones_like(predicted), "A row") + _safe_log(
        predicted, np.ones_like(predicted), "predicted belief")
    v = _safe_log(np.asarray(init, dtype=np.float64), np.ones_like(predicted), "initial belief")
    out = []
    for _ in range(steps):
        v = v + rate * (target - v)
        out.append(softmax(v))
    return out


def step_efe(pomdp: TabularPOMDP, belief: Tensor) -> tuple[float, float]:
    """Risk ``KL[A s || C]`` and ambiguity ``s . H[A]`` for a predicted state belief ``s``."""
    qo = pomdp.A @ belief
    risk = kl_divergence(qo, pomdp.C)
    amb = float(np.dot(belief, DiscreteDist(pomdp.A).entropy()))
    return risk, amb


def policy_efe(pomdp: TabularPOMDP, belief: Tensor, policy: Sequence[int]) -> float:
    s = np.asarray(belief, dtype=np.float64)
    total = 0.0
    for a in policy:
        s = pomdp.B[a] @ s
        risk, amb = step_efe(pomdp, s)
        total += risk + amb
    return total


@dataclass
class PolicyPosterior:
    policies: list[tuple[int, ...]]
    efe: Tensor
    probs: Tensor


def ai_policy_posterior(pomdp: TabularPOMDP, belief: DiscreteDist | Tensor) -> PolicyPosterior:
    """``Q(pi) = softmax(-gamma * sum_t G_t(pi))`` over every action sequence of length ``T``."""
    s0 = _check_dist(_probs(belief), "initial belief")
    pols = pomdp.policies()
    g = np.array([policy_efe(pomdp, s0, p) for p in pols])
    return PolicyPosterior(pols, g, softmax(-pomdp.gamma * g))


# ---------------------------------------------------------------------------
# Gaussian mixtures: evidence vs divergence fitting


@dataclass
class GaussianMixture:
    weights: Tensor
    means: Tensor
    variances: Tensor

    def __post_init__(self) -> None:
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.atleast_1d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if not (self.weights.shape == self.means.shape == self.variances.shape) or self.weights.ndim != 1:
            raise ShapeError("mixture weights, means and variances must be equal-length vectors")
        if np.any(self.variances <= 0):
            raise DomainError("mixture variances must be positive")
        _check_dist(self.weights, "mixture weights")

    @classmethod
    def from_components(cls, comps: Sequence[tuple[float, float, float]]) -> "GaussianMixture":
        w, m, v = zip(*comps)
        return cls(np.array(w), np.array(m), np.array(v))

    def component_pdfs(self, x: Tensor) -> Tensor:
        x = np.asarray(x, dtype=np.float64)[:, None]
        return np.exp(-0.5 * (x - self.means) ** 2 / self.variances) / np.sqrt(2 * np.pi * self.variances)

    def pdf(self, x: Tensor) -> Tensor:
        return self.component_pdfs(x) @ self.weights


def target_mixture() -> GaussianMixture:
    """Bimodal desire: equal-weight components at 1 (variance 1) and 4 (variance 0.4)."""
    return GaussianMixture.from_components([(0.5, 1.0, 1.0), (0.5, 4.0, 0.4)])


@dataclass(frozen=True)
class QuadratureGrid:
    lo: float = -10.0
    hi: float = 15.0
    n: int = 4000

    @property
    def points(self) -> Tensor:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def weights(self) -> Tensor:
        w = np.full(self.n, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing  # trapezoid rule
        return w


def mixture_kl(p: GaussianMixture, q: GaussianMixture, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """``KL[p || q]`` by trapezoid quadrature."""
    x, w = grid.points, grid.weights
    fp, fq = p.pdf(x), q.pdf(x)
    live = fp > 0
    return float(np.sum(w[live] * fp[live] * (np.log(fp[live]) - np.log(np.maximum(fq[live], LOG_FLOOR)))))


def mixture_evidence(p: GaussianMixture, target: GaussianMixture, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """``E_p[ln target]`` by quadrature."""
    x, w = grid.points, grid.weights
    return float(np.sum(w * p.pdf(x) * np.log(np.maximum(target.pdf(x), LOG_FLOOR))))


def _softplus(s: Tensor) -> Tensor:
    return np.logaddexp(0.0, s)


def _sigmoid(s: Tensor) -> Tensor:
    return 0.5 * (1.0 + np.tanh(0.5 * s))


@dataclass
class MixtureFit:
    mixture: GaussianMixture
    objective: float
    converged: bool
    trace: list[float] = field(default_factory=list)


def _unpack(theta: Tensor, k: int, floor: float) -> tuple[Tensor, Tensor, Tensor]:
    logits, means, s = theta[:k], theta[k:2 * k], theta[2 * k:]
    return softmax(logits), means, _softplus(s) + floor


def _mixture_objective(theta: Tensor, k: int, floor: float, mode: str, x: Tensor, qw: Tensor,
                       log_t: Tensor) -> tuple[float, Tensor]:
    """Objective to minimise and its analytic gradient in the unconstrained parameters."""
    w, m, v = _unpack(theta, k, floor)
    d = x[:, None] - m
    comp = np.exp(-0.5 * d * d / v) / np.sqrt(2 * np.pi * v)  # (n, k)
    f = comp @ w
    if mode == "divergence":
        log_f = np.log(np.maximum(f, LOG_FLOOR))
        value = float(np.sum(qw * f * (log_f - log_t)))
        dg = qw * (log_f + 1.0 - log_t)
    else:
        value = -float(np.sum(qw * f * log_t))
        dg = -qw * log_t
    # df/dw_k, df/dm_k, df/dv_k on every grid point
    g_w = dg @ comp
    g_m = w * (dg @ (comp * d / v))
    g_v = w * (dg @ (comp * (0.5 * d * d / v ** 2 - 0.5 / v)))
    g_logits = w * (g_w - np.dot(w, g_w))
    g_s = g_v * _sigmoid(theta[2 * k:])
    return value, np.concatenate([g_logits, g_m, g_s])


def fit_mixture(target: GaussianMixture, n_components: int, mode: str = "divergence", steps: int = 4000,
                lr: float = 0.05, grid: QuadratureGrid = QuadratureGrid(), seed: int = 0,
                tol: float = 1e-10, variance_floor: float | None = None) -> MixtureFit:
    """Fit a mixture to ``target`` by Adam on a fixed quadrature grid.

    ``mode="divergence"`` minimises ``KL[fit || target]``; ``mode="evidence"``
    maximises ``E_fit[ln target]``. Variances are ``softplus(s) + floor``; the
    floor defaults to ``(4 * grid spacing)^2`` so that the narrowest allowed
    component still spans several quadrature points.
    """
    if n_components < 1:
        raise DomainError("n_components must be >= 1")
    if mode not in ("divergence", "evidence"):
        raise DomainError(f"unknown fit mode {mode!r}; expected 'divergence' or 'evidence'")
    floor = (4 * grid.spacing) ** 2 if variance_floor is None else variance_floor
    x, qw = grid.points, grid.weights
    log_t = np.log(np.maximum(target.pdf(x), LOG_FLOOR))
    rng = make_rng(seed)
    k = n_components
    t_mean = float(np.dot(target.weights, target.means))
    t_var = float(np.dot(target.weights, target.variances + target.means ** 2) - t_mean ** 2)
    spread = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
    means0 = t_mean + math.sqrt(t_var) * spread + 0.1 * rng.standard_normal(k)
    var0 = np.full(k, t_var / k)
    theta = np.concatenate([np.zeros(k), means0, np.log(np.expm1(np.maximum(var0 - floor, 1e-6)))])
    m1, m2 = np.zeros_like(theta), np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-12
    trace: list[float] = []
    converged = False
    for i in range(1, steps + 1):
        value, g = _mixture_objective(theta, k, floor, mode, x, qw, log_t)
        trace.append(value)
        if not np.all(np.isfinite(g)):
            break
        if len(trace) > 50 and abs(trace[-50] - value) < tol * max(1.0, abs(value)):
            converged = True
            break
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        theta = theta - lr * (m1 / (1 - b1 ** i)) / (np.sqrt(m2 / (1 - b2 ** i)) + eps)
    w, m, v = _unpack(theta, k, floor)
    value, _ = _mixture_objective(theta, k, floor, mode, x, qw, log_t)
    return MixtureFit(GaussianMixture(w, m, v), value, converged, trace)


def grid_mode(mix: GaussianMixture, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """Location of the largest density value on the grid."""
    x = grid.points
    return float(x[int(np.argmax(mix.pdf(x)))])
