"""Analytical Kalman filtering and its gradient-descent (predictive coding) counterpart.

Both filters target the same per-step MAP objective

    J(mu) = 0.5 (y - C mu)^T Pz (y - C mu) + 0.5 (mu - mu_hat)^T Px (mu - mu_hat)

where ``mu_hat = A mu_prev + B u``, ``Pz`` is the observation precision and
``Px`` the precision of the projected state. The analytical filter solves it
in closed form; the gradient filter takes a few descent steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import kernels
from .numcore import DivergenceError, DomainError, FreegradError, ShapeError, Tensor, gaussian_init, make_rng

JITTER = 1e-9


class SingularInnovationError(FreegradError, ArithmeticError):
    """The innovation covariance could not be inverted even after jitter."""


@dataclass
class LinearModel:
    A: Tensor
    B: Tensor
    C: Tensor
    Q: Tensor  # process noise covariance (Sigma_omega)
    R: Tensor  # observation noise covariance (Sigma_z)

    def __post_init__(self) -> None:
        self.A, self.B, self.C, self.Q, self.R = (np.atleast_2d(np.asarray(m, dtype=np.float64))
                                                  for m in (self.A, self.B, self.C, self.Q, self.R))
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n:
            raise ShapeError(f"inconsistent model shapes A{self.A.shape} B{self.B.shape} C{self.C.shape}")
        if self.Q.shape != (n, n) or self.R.shape != (self.C.shape[0],) * 2:
            raise ShapeError(f"noise covariances Q{self.Q.shape} R{self.R.shape} do not match the model")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def copy(self) -> "LinearModel":
        return LinearModel(self.A.copy(), self.B.copy(), self.C.copy(), self.Q.copy(), self.R.copy())


@dataclass
class FilterState:
    mu: Tensor
    Sigma: Tensor


@dataclass
class TrackingScenario:
    dt: float
    horizon: int
    controls: Tensor  # (T, n_u)
    states: Tensor  # (T, n) true states after each transition
    observations: Tensor  # (T, m)
    x0: Tensor
    process_var: float
    obs_var: float
    seed: int


def kf_project(state: FilterState, model: LinearModel, u: Tensor) -> FilterState:
    """Prior for the next step: ``A mu + B u`` and ``A Sigma A^T + Q``."""
    mu = np.asarray(state.mu, dtype=np.float64)
    if mu.shape != (model.n,):
        raise ShapeError(f"state mean {mu.shape} does not match model dimension {model.n}")
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if u.shape != (model.B.shape[1],):
        raise ShapeError(f"control {u.shape} does not match B {model.B.shape}")
    Sigma = model.A @ state.Sigma @ model.A.T + model.Q
    return FilterState(model.A @ mu + model.B @ u, 0.5 * (Sigma + Sigma.T))


def _innovation_solve(S: Tensor, rhs: Tensor) -> Tensor:
    """Solve ``S X = rhs`` for symmetric S, adding jitter if the factorisation fails."""
    S = 0.5 * (S + S.T)
    for jitter in (0.0, JITTER, JITTER * 1e3):
        try:
            L = np.linalg.cholesky(S + jitter * np.eye(S.shape[0]))
            return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        except np.linalg.LinAlgError:
            continue
    raise SingularInnovationError(f"innovation covariance is singular (condition number {np.linalg.cond(S):.3e})")


def kalman_gain(Sigma_hat: Tensor, model: LinearModel) -> Tensor:
    S = model.C @ Sigma_hat @ model.C.T + model.R
    # K = Sigma_hat C^T S^-1, computed as (S^-1 C Sigma_hat)^T since S is symmetric.
    return _innovation_solve(S, model.C @ Sigma_hat).T


def kf_correct(projected: FilterState, model: LinearModel, y: Tensor) -> FilterState:
    """Measurement update with the gain ``K = Sigma_hat C^T (C Sigma_hat C^T + R)^-1``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (model.C.shape[0],):
        raise ShapeError(f"observation {y.shape} does not match C {model.C.shape}")
    K = kalman_gain(projected.Sigma, model)
    mu = projected.mu + K @ (y - model.C @ projected.mu)
    Sigma = (np.eye(model.n) - K @ model.C) @ projected.Sigma
    return FilterState(mu, 0.5 * (Sigma + Sigma.T))


def map_objective(mu: Tensor, mu_hat: Tensor, prec_x: Tensor, model: LinearModel, y: Tensor,
                  prec_z: Tensor | None = None) -> float:
    prec_z = np.linalg.inv(model.R) if prec_z is None else prec_z
    ez = y - model.C @ mu
    ex = mu - mu_hat
    return float(0.5 * ez @ prec_z @ ez + 0.5 * ex @ prec_x @ ex)


def map_gradient_direction(mu: Tensor, mu_hat: Tensor, prec_x: Tensor, model: LinearModel, y: Tensor,
                           prec_z: Tensor) -> Tensor:
    """``C^T Pz eps_z - Px eps_x``: the negative gradient of the MAP objective."""
    return model.C.T @ (prec_z @ (y - model.C @ mu)) - prec_x @ (mu - mu_hat)


def map_descent(mu_hat: Tensor, prec_x: Tensor, model: LinearModel, y: Tensor, steps: int, rate: float,
                prec_z: Tensor | None = None, mu0: Tensor | None = None) -> tuple[Tensor, list[float]]:
    """Run ``steps`` gradient steps from ``mu0`` (default ``mu_hat``); returns the mean and loss trace."""
    prec_z = np.linalg.inv(model.R) if prec_z is None else prec_z
    mu = np.array(mu_hat if mu0 is None else mu0, dtype=np.float64)
    losses = [map_objective(mu, mu_hat, prec_x, model, y, prec_z)]
    for _ in range(steps):
        mu = mu + rate * map_gradient_direction(mu, mu_hat, prec_x, model, y, prec_z)
        if not np.all(np.isfinite(mu)) or np.max(np.abs(mu)) > 1e12:
            raise DivergenceError("gradient filter diverged; reduce the step size")
        losses.append(map_objective(mu, mu_hat, prec_x, model, y, prec_z))
    return mu, losses


def stable_rate(prec_x: Tensor, model: LinearModel, prec_z: Tensor | None = None) -> float:
    """Largest safe step, ``1 / lambda_max`` of the objective's Hessian."""
    prec_z = np.linalg.inv(model.R) if prec_z is None else prec_z
    H = model.C.T @ prec_z @ model.C + prec_x
    return 1.0 / float(np.max(np.linalg.eigvalsh(0.5 * (H + H.T))))


def optimal_rate(prec_x: Tensor, model: LinearModel, prec_z: Tensor | None = None) -> float:
    """Fixed step ``2 / (lambda_min + lambda_max)``, the fastest-contracting constant step for a quadratic."""
    prec_z = np.linalg.inv(model.R) if prec_z is None else prec_z
    ev = np.linalg.eigvalsh(model.C.T @ prec_z @ model.C + prec_x)
    return 2.0 / float(ev[0] + ev[-1])


def grad_filter_step(state_mu: Tensor, model: LinearModel, y: Tensor, u: Tensor, inner_steps: int = 5,
                     rate: float | None = None, prec_x: Tensor | None = None,
                     prec_z: Tensor | None = None) -> Tensor:
    """One step of the gradient filter; returns the new mean only.

    The mean starts at the projection ``A mu + B u`` and follows
    ``dmu = C^T Pz eps_z - Px eps_x`` for ``inner_steps`` iterations.
    ``prec_x`` defaults to ``Q^-1``; ``rate`` defaults to the stable step.
    """
    if inner_steps < 1:
        raise DomainError("inner_steps must be at least 1")
    prec_x = np.linalg.inv(model.Q) if prec_x is None else prec_x
    prec_z = np.linalg.inv(model.R) if prec_z is None else prec_z
    rate = stable_rate(prec_x, model, prec_z) if rate is None else rate
    mu_hat = model.A @ np.asarray(state_mu, dtype=np.float64) + model.B @ np.atleast_1d(u)
    mu, _ = map_descent(mu_hat, prec_x, model, np.atleast_1d(y), inner_steps, rate, prec_z)
    return mu


def run_kalman(model: LinearModel, scenario: TrackingScenario, Sigma0: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
    """Analytical filter over the whole scenario; returns means (T, n) and covariances."""
    st = FilterState(scenario.x0.copy(), np.eye(model.n) if Sigma0 is None else Sigma0)
    means, covs = [], []
    for t in range(scenario.horizon):
        st = kf_correct(kf_project(st, model, scenario.controls[t]), model, scenario.observations[t])
        means.append(st.mu)
        covs.append(st.Sigma)
    return np.array(means), covs


def projected_precisions(model: LinearModel, scenario: TrackingScenario,
                         Sigma0: Tensor | None = None) -> Tensor:
    """Inverse projected covariances ``(A Sigma A^T + Q)^-1`` along the analytical recursion, shape (T, n, n).

    The covariance path of the analytical filter does not depend on the data,
    so it can be computed once and handed to the gradient filter.
    """
    Sigma = np.eye(model.n) if Sigma0 is None else np.asarray(Sigma0, dtype=np.float64)
    out = np.empty((scenario.horizon, model.n, model.n))
    for t in range(scenario.horizon):
        Sigma_hat = model.A @ Sigma @ model.A.T + model.Q
        Sigma_hat = 0.5 * (Sigma_hat + Sigma_hat.T)
        out[t] = _innovation_solve(Sigma_hat, np.eye(model.n))
        K = kalman_gain(Sigma_hat, model)
        Sigma = (np.eye(model.n) - K @ model.C) @ Sigma_hat
        Sigma = 0.5 * (Sigma + Sigma.T)
    return out


def run_grad_filter(model: LinearModel, scenario: TrackingScenario, inner_steps: int = 5,
                    rate: float | None = None, prec_x: Tensor | None = None,
                    covariance: str = "analytic") -> Tensor:
    """Gradient filter over the scenario using the compiled loop when available.

    With ``covariance="analytic"`` the state precision at each step is the
    inverse projected covariance of the analytical recursion, so only the mean
    is found by descent. ``covariance="fixed"`` uses ``prec_x`` (default
    ``Q^-1``) throughout. The default step size is ``optimal_rate`` of each
    step's objective.
    """
    prec_z = np.linalg.inv(model.R)
    if covariance == "analytic":
        if prec_x is not None:
            raise DomainError("prec_x cannot be combined with covariance='analytic'")
        precs = projected_precisions(model, scenario)
    elif covariance == "fixed":
        precs = np.broadcast_to(np.linalg.inv(model.Q) if prec_x is None else prec_x,
                                (scenario.horizon, model.n, model.n))
    else:
        raise DomainError(f"unknown covariance mode {covariance!r}; expected 'analytic' or 'fixed'")
    if rate is None:
        if covariance == "fixed":
            rates = np.full(scenario.horizon, optimal_rate(precs[0], model, prec_z))
        else:
            rates = np.array([optimal_rate(P, model, prec_z) for P in precs])
    else:
        rates = np.full(scenario.horizon, float(rate))
    return kernels.grad_filter_run(model.A, model.B, model.C, precs, prec_z, scenario.observations,
                                   scenario.controls, scenario.x0, inner_steps, rates)


@dataclass
class LearnFlags:
    A: bool = False
    B: bool = False
    C: bool = False


@dataclass
class LearningRun:
    model: LinearModel
    means: Tensor
    losses: Tensor  # MAP objective after the inner steps, per time step
    diverged_at: int | None = None  # first step whose descent blew up; later steps are missing

    def tracking_rmse(self, truth: Tensor) -> float:
        """RMSE against the true states, infinite when the run diverged."""
        if self.diverged_at is not None:
            return float("inf")
        return rmse(self.means, truth)


def dynamics_updates(model: LinearModel, mu: Tensor, mu_prev: Tensor, u: Tensor, y: Tensor,
                     prec_x: Tensor, prec_z: Tensor) -> dict[str, Tensor]:
    """Hebbian products: precision-weighted error outer the local activity.

    ``dA = Px eps_x mu_prev^T``, ``dB = Px eps_x u^T``, ``dC = Pz eps_z mu^T``
    with ``eps_x = mu - A mu_prev - B u`` and ``eps_z = y - C mu``.
    """
    ex = prec_x @ (mu - model.A @ mu_prev - model.B @ u)
    ez = prec_z @ (y - model.C @ mu)
    return {"A": np.outer(ex, mu_prev), "B": np.outer(ex, u), "C": np.outer(ez, mu)}


def learn_dynamics(model: LinearModel, scenario: TrackingScenario, flags: LearnFlags, rate: float = 1e-5,
                   inner_steps: int = 5, step_rate: float | None = None, x0: Tensor | None = None) -> LearningRun:
    """Filter with the gradient scheme while learning A, B and/or C online.

    After each step's inner descent the enabled matrices move along their
    Hebbian updates with learning rate ``rate``. A run whose estimates blow up
    stops early and records the step in ``diverged_at``.
    """
    m = model.copy()
    prec_x = np.linalg.inv(m.Q)
    prec_z = np.linalg.inv(m.R)
    mu_prev = np.array(scenario.x0 if x0 is None else x0, dtype=np.float64)
    means, losses = [], []
    for t in range(scenario.horizon):
        u = np.atleast_1d(scenario.controls[t])
        y = scenario.observations[t]
        mu_hat = m.A @ mu_prev + m.B @ u
        try:
            r = stable_rate(prec_x, m, prec_z) if step_rate is None else step_rate
            if not np.all(np.isfinite(mu_hat)) or np.max(np.abs(mu_hat)) > 1e12:
                raise DivergenceError("projected state blew up")
            mu, trace = map_descent(mu_hat, prec_x, m, y, inner_steps, r, prec_z)
        except (DivergenceError, np.linalg.LinAlgError):
            return LearningRun(m, np.array(means).reshape(-1, m.n), np.array(losses), diverged_at=t)
        losses.append(trace[-1])
        ups = dynamics_updates(m, mu, mu_prev, u, y, prec_x, prec_z)
        if flags.A:
            m.A = m.A + rate * ups["A"]
        if flags.B:
            m.B = m.B + rate * ups["B"]
        if flags.C:
            m.C = m.C + rate * ups["C"]
        means.append(mu)
        mu_prev = mu
    return LearningRun(m, np.array(means).reshape(-1, m.n), np.array(losses))


def kinematic_matrices(dt: float) -> tuple[Tensor, Tensor]:
    """Constant-acceleration transition; the control is added to the acceleration each step."""
    A = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    B = np.array([[0.0], [0.0], [1.0]])
    return A, B


def decaying_control(horizon: int, dt: float, amplitude: float = 10.0, decay: float = 2.0) -> Tensor:
    """Per-step acceleration increments that make an initial ``amplitude`` decay as ``amplitude * exp(-decay t)``."""
    t = np.arange(horizon + 1) * dt
    return np.diff(amplitude * np.exp(-decay * t))[:, None]


def make_kinematic_scenario(dt: float = 0.01, horizon: int = 2000, seed: int = 0, process_var: float = 1e-3,
                            obs_var: float = 1.0, obs_dim: int = 3, amplitude: float = 10.0,
                            decay: float = 2.0) -> tuple[LinearModel, TrackingScenario]:
    """Position/velocity/acceleration body starting with a high acceleration that decays exponentially.

    ``C`` is drawn from N(0, 1); noise covariances are diagonal with the
    injected variances and the noise hits all three state components. The
    returned states are the true trajectory and the observations are
    ``C x_t + noise``.
    """
    if horizon < 1 or dt < 0:
        raise DomainError("horizon must be >= 1 and dt >= 0")
    rng = make_rng(seed)
    A, B = kinematic_matrices(dt)
    C = gaussian_init((obs_dim, 3), 0.0, 1.0, rng)
    model = LinearModel(A, B, C, process_var * np.eye(3), obs_var * np.eye(obs_dim))
    u = decaying_control(horizon, dt, amplitude, decay)
    x0 = np.array([0.0, 0.0, amplitude])
    x = x0.copy()
    states, obs = [], []
    sq_p, sq_o = np.sqrt(process_var), np.sqrt(obs_var)
    for t in range(horizon):
        x = A @ x + B @ u[t] + sq_p * rng.standard_normal(3)
        states.append(x)
        obs.append(C @ x + sq_o * rng.standard_normal(obs_dim))
    return model, TrackingScenario(dt, horizon, u, np.array(states), np.array(obs), x0,
                                   process_var, obs_var, seed)


def rmse(estimates: Tensor, truth: Tensor) -> float:
    diff = np.asarray(estimates) - np.asarray(truth)
    return float(np.sqrt(np.mean(diff * diff)))
