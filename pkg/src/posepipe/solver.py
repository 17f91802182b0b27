"""Self-adaptive Levenberg-Marquardt for nonlinear least squares.

The damping parameter is tied to the residual norm, mu_k = alpha_k *
||f(x_k)||^lam, and alpha_k is adapted from the actual-over-predicted
reduction ratio through an update factor whose sensitivity grows with
the problem-size parameter eta.  Designed for zero-residual systems
whose Jacobian may be rank deficient along the solution set; a local
error bound there is enough for fast local convergence.

A conventional fixed-scaling LM mode (mu times/divide 10) shares the
same iteration loop and linear algebra and serves as the baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class NonFiniteResidual(RuntimeError):
    """Residual or Jacobian evaluated to a non-finite value."""


class LinearSolveFailure(RuntimeError):
    """Damped normal equations unsolvable even at the damping cap."""


class SolverDiverged(RuntimeError):
    """Steps keep increasing the cost with the damping at its cap."""


class ResidualSystem:
    """A differentiable residual system f(x) = 0.

    Subclasses provide ``n_params``, ``residual(x) -> (m,) array`` and
    ``jacobian(x) -> (m, n) array or sparse matrix``.
    """

    n_params: int

    def residual(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FunctionSystem(ResidualSystem):
    """Wrap plain callables as a residual system."""

    def __init__(self, n_params, residual_fn, jacobian_fn=None, fd_step=1e-7):
        self.n_params = n_params
        self._f = residual_fn
        self._jac = jacobian_fn
        self._h = fd_step

    def residual(self, x):
        return np.atleast_1d(np.asarray(self._f(x), dtype=float))

    def jacobian(self, x):
        if self._jac is not None:
            return np.atleast_2d(np.asarray(self._jac(x), dtype=float))
        return finite_difference_jacobian(self.residual, x, self._h)


def finite_difference_jacobian(fn, x, h=1e-7):
    """Central-difference Jacobian, column by column."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fn(x))
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        jac[:, j] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / (2 * step)
    return jac


@dataclass
class SolverConfig:
    """Knobs of the self-adaptive iteration.

    eta is a positive integer > 1; block solves pass the number of
    cameras in the block.  nu in (0, 1) is the target reduction ratio,
    xi > 0 the lower bound of the update factor, alpha0 the initial
    damping scale and lam the residual-norm exponent of the damping.
    """

    eta: int = 2
    lam: float = 1.0
    nu: float = 0.25
    xi: float = 1e-8
    alpha0: float = 1e-4
    max_iterations: int = 100
    gradient_tol: float = 1e-12
    cost_tol: float = 0.0
    accept_threshold: float = 1e-4
    mu_cap_factor: float = 1e16
    adaptive: bool = True
    keep_iterates: bool = False
    zero_cost_floor: float = 0.0  # costs at/below count as a zero residual
    alpha_floor: float | None = None  # absolute floor on alpha; None -> xi

    def __post_init__(self):
        if int(self.eta) != self.eta or self.eta < 2:
            raise ValueError("eta must be an integer > 1")
        self.eta = int(self.eta)
        if not 0.0 < self.nu < 1.0:
            raise ValueError("nu must lie in (0, 1)")
        if self.xi <= 0.0 or self.alpha0 <= 0.0:
            raise ValueError("xi and alpha0 must be positive")

    @property
    def mu_cap(self) -> float:
        return self.mu_cap_factor * self.alpha0


def rho_update(alpha: float, nu_k: float, config: SolverConfig) -> float:
    """Damping-scale update  alpha * max{xi, 1 - eta^ceil(1/nu) (nu_k - nu)^p}
    with the odd power p = 2 ceil(log2 eta) - 1, floored at xi.

    The odd exponent makes the factor > 1 exactly when nu_k < nu and
    < 1 when nu_k > nu; larger eta sharpens the response away from nu.
    The absolute floor keeps the damping scale strictly positive and
    bounded away from zero, which pins iterates against drifting along
    exact null directions (e.g. the monocular scale gauge).
    """
    power = 2 * math.ceil(math.log2(config.eta)) - 1
    scale = float(config.eta) ** math.ceil(1.0 / config.nu)
    factor = max(config.xi, 1.0 - scale * (nu_k - config.nu) ** power)
    floor = config.xi if config.alpha_floor is None else config.alpha_floor
    return max(floor, alpha * factor)


@dataclass
class TraceEntry:
    iteration: int
    cost: float
    mu: float
    nu: float
    accepted: bool
    x: np.ndarray | None = None


@dataclass
class SolverState:
    """Mutable state of one solve: iterate, damping scale and ratios."""

    x: np.ndarray
    f: np.ndarray
    cost: float
    alpha: float
    mu: float = 0.0
    phi: float = 0.0      # actual reduction of the last step
    psi: float = 0.0      # predicted (Gauss-Newton model) reduction
    nu: float = 0.0
    iteration: int = 0
    small_decrease_streak: int = 0
    trace: list[TraceEntry] = field(default_factory=list)
    cached_jacobian: object = None  # valid for the current x only


@dataclass
class SolveResult:
    x: np.ndarray
    cost: float
    gradient_norm: float
    iterations: int
    status: str               # zero_residual | gradient | cost | max_iterations
    trace: list[TraceEntry]

    @property
    def converged(self) -> bool:
        return self.status != "max_iterations"


# ---------------------------------------------------------------------------
# linear algebra: ordinary and damped normal equations
#
# Jacobians may be dense arrays, scipy sparse matrices or any object
# exposing gradient/damped_solve/gn_model_min, which lets structured
# problems plug in specialized factorizations.


def _gradient(jac, f):
    if hasattr(jac, "gradient"):
        return jac.gradient(f)
    return np.asarray(jac.T @ f).ravel()


def damped_normal_solve(jac, f, mu):
    """Solve (J^T J + mu I) d = -J^T f; returns None on failure."""
    if hasattr(jac, "damped_solve"):
        return jac.damped_solve(f, mu)
    g = _gradient(jac, f)
    n = g.size
    if sp.issparse(jac):
        h = (jac.T @ jac).tocsc() + mu * sp.identity(n, format="csc")
        try:
            d = spla.spsolve(h, -g)
        except RuntimeError:
            d = None
        if d is None or not np.all(np.isfinite(d)):
            d = spla.lsmr(jac, -f, damp=math.sqrt(mu), atol=1e-14,
                          btol=1e-14, maxiter=10 * n)[0]
        return d if np.all(np.isfinite(d)) else None
    h = jac.T @ jac + mu * np.eye(n)
    try:
        d = np.linalg.solve(h, -g)
    except np.linalg.LinAlgError:
        d = np.linalg.lstsq(h, -g, rcond=None)[0]
    return d if np.all(np.isfinite(d)) else None


# ---------------------------------------------------------------------------
# iteration


def _check_finite(f):
    if not np.all(np.isfinite(f)):
        raise NonFiniteResidual("residual contains non-finite entries")


def lm_step(state: SolverState, system: ResidualSystem,
            config: SolverConfig) -> bool:
    """One damped step; returns True if the trial point was accepted.

    Solves the damped normal equations at the current iterate, measures
    the actual and predicted reductions and their ratio, accepts the
    step when the ratio clears the acceptance threshold and updates the
    damping scale either way.
    """
    jac = state.cached_jacobian
    if jac is None:
        jac = system.jacobian(state.x)
    state.cached_jacobian = None
    norm_f = math.sqrt(state.cost)
    if config.adaptive:
        mu = state.alpha * norm_f ** config.lam
    else:
        mu = state.alpha
    mu = max(mu, 1e-300)

    d = damped_normal_solve(jac, state.f, mu)
    while d is None:
        if mu >= config.mu_cap:
            raise LinearSolveFailure("damped system unsolvable at the mu cap")
        mu *= 10.0
        d = damped_normal_solve(jac, state.f, mu)
    state.mu = mu

    x_trial = state.x + d
    f_trial = system.residual(x_trial)
    if np.all(np.isfinite(f_trial)):
        cost_trial = float(f_trial @ f_trial)
    else:
        cost_trial = math.inf

    # predicted reduction: Gauss-Newton model decrease at the step taken;
    # >= mu ||d||^2 >= 0 because d minimizes the damped model
    model = jac @ d + state.f
    state.phi = state.cost - cost_trial
    state.psi = max(state.cost - float(model @ model), 0.0)
    if math.isinf(cost_trial):
        state.nu = -math.inf
    else:
        state.nu = state.phi / max(state.psi, 1e-300)

    accepted = state.nu > config.accept_threshold

    if not math.isfinite(cost_trial):
        # a non-finite trial is outside the model entirely (e.g. a point
        # crossed zero depth): escalate like a failed linear solve
        state.alpha *= 10.0
    elif config.adaptive:
        # the update factor is defined for ratios in (0, 1); ratios from
        # overshooting or better-than-model steps are clamped into it
        nu_for_update = min(max(state.nu, 0.0), 1.0)
        state.alpha = rho_update(state.alpha, nu_for_update, config)
        state.alpha = max(state.alpha, 1e-300)
        assert state.alpha > 0.0
    else:
        state.alpha = state.alpha / 10.0 if accepted else state.alpha * 10.0
        state.alpha = min(max(state.alpha, 1e-300), config.mu_cap)

    state.trace.append(TraceEntry(
        state.iteration, state.cost, mu, state.nu, accepted,
        state.x.copy() if config.keep_iterates else None))

    if accepted:
        prev_cost = state.cost
        state.x = x_trial
        state.f = f_trial
        state.cost = cost_trial
        if prev_cost - cost_trial < config.cost_tol * max(prev_cost, 1.0):
            state.small_decrease_streak += 1
        else:
            state.small_decrease_streak = 0
    else:
        if mu >= config.mu_cap:
            raise SolverDiverged(
                f"cost not reduced with damping at the cap {config.mu_cap:g}")
    state.iteration += 1
    return accepted


def solve(system: ResidualSystem, x0, config: SolverConfig) -> SolveResult:
    """Run the iteration to a stationary point of ||f(x)||^2.

    Terminates on gradient norm, on three consecutive accepted steps
    with a relative cost decrease below cost_tol, or on the iteration
    cap (best iterate returned, flagged in ``status``).
    """
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise NonFiniteResidual("non-finite starting point")
    f = system.residual(x)
    _check_finite(f)
    state = SolverState(x=x, f=f, cost=float(f @ f), alpha=config.alpha0)

    if state.cost <= config.zero_cost_floor:
        return SolveResult(state.x, state.cost, 0.0, 0, "zero_residual",
                           state.trace)

    status = "max_iterations"
    gnorm = math.inf
    while state.iteration < config.max_iterations:
        jac = system.jacobian(state.x)
        gnorm = float(np.linalg.norm(_gradient(jac, state.f)))
        if gnorm < config.gradient_tol:
            status = "gradient"
            break
        state.cached_jacobian = jac
        lm_step(state, system, config)
        if state.cost <= config.zero_cost_floor:
            status = "zero_residual"
            break
        if config.cost_tol > 0 and state.small_decrease_streak >= 3:
            status = "cost"
            break
        if (math.isfinite(state.nu)
                and state.psi <= 1e-12 * max(state.cost, 1e-300)):
            # the model predicts no reduction measurable against the cost's
            # floating-point noise: converged to the numerical floor
            status = "cost"
            break

    return SolveResult(state.x, state.cost, gnorm, state.iteration,
                       status, state.trace)


def write_trace_csv(trace: list[TraceEntry], path) -> None:
    """Export a solve trace as ``iter,cost,mu,nu,accepted`` rows."""
    with open(path, "w") as fh:
        fh.write("iter,cost,mu,nu,accepted\n")
        for e in trace:
            fh.write(f"{e.iteration},{e.cost:.17g},{e.mu:.17g},"
                     f"{e.nu:.17g},{int(e.accepted)}\n")


def convergence_order(distances) -> float:
    """Empirical order from a log-log regression of consecutive errors.

    Fits log d_{k+1} = q log d_k + c over the supplied (already
    filtered) distance sequence and returns the slope q.
    """
    d = np.asarray(distances, dtype=float)
    if d.size < 3:
        raise ValueError("need at least 3 distances to estimate an order")
    lx = np.log(d[:-1])
    ly = np.log(d[1:])
    q, _ = np.polyfit(lx, ly, 1)
    return float(q)
