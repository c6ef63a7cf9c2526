"""Primal-dual forward-backward iteration for one minimizing-movement step.

One step solves the saddle problem

    min_{rho, m} max_{phi, psi[, mu]}  dt V(rho) + sum_i M_i(rho) phi_i
        + (I m)_i . psi_i [+ rho_i mu_i] - F(phi, psi[, mu]) + G(rho, m)

where ``G`` is the indicator of the continuity constraint with box bounds
and ``F`` the indicator of the parabola set (plus ``dt U*(mu/dt)`` when the
energy is split).  Without splitting ``V`` is the whole energy and ``mu``
is absent.

The dual ascent linearizes the mobility around the current primal iterate,
the primal descent is an explicit gradient step followed by the projection
of :func:`~wgflow.prox.prox_primal`, and the reflection corrects ``2u+ - u``
by the change of the primal gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .grid import GridSpec, apply_avg, apply_avg_adjoint
from .physics import GradientFlowProblem, Mobility, mobility_midpoint
from .prox import ActiveSetState, action_value, project_parabola, prox_conjugate_mu, prox_primal

__all__ = [
    "CocoercivityWarning",
    "SolverConfig",
    "PrimalState",
    "DualState",
    "Linearization",
    "SaddleResult",
    "stepsize_bound",
    "check_stepsize",
    "dual_update",
    "primal_update",
    "solve_saddle",
    "initial_duals",
    "WarmStart",
]


class CocoercivityWarning(UserWarning):
    """tau*sigma exceeds the step-size bound; convergence is not guaranteed."""


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes and stopping rule of the iteration.

    ``sigma`` defaults to ``1/tau``.  ``convex_split`` enables the implicit
    treatment of the energy's convex part when the model provides one.
    ``cold_start`` starts every step from zero primal and dual variables
    instead of ``(rho_n, 0)`` and the previous duals.
    """

    tau: float
    sigma: Optional[float] = None
    tolerance: float = 1e-5
    iter_max: int = 20000
    check_stepsize: bool = True
    cold_start: bool = False
    convex_split: bool = True

    def __post_init__(self):
        if self.sigma is None:
            object.__setattr__(self, "sigma", 1.0 / self.tau)
        if not self.tau > 0 or not self.sigma > 0:
            raise ValueError(f"step sizes must be positive (tau={self.tau}, sigma={self.sigma})")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.iter_max < 1:
            raise ValueError("iter_max must be at least 1")


@dataclass
class PrimalState:
    rho: np.ndarray
    m: tuple
    rho_bar: np.ndarray
    m_bar: tuple

    @classmethod
    def start(cls, rho, grid: GridSpec) -> "PrimalState":
        rho = np.array(rho, dtype=float, copy=True)
        m = grid.zeros_momentum()
        return cls(rho, m, rho.copy(), tuple(a.copy() for a in m))


@dataclass
class DualState:
    """Dual variables; ``x`` is the last Moreau proximal point (split energies only)."""

    phi: np.ndarray
    psi: np.ndarray
    mu: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, grid: GridSpec, split: bool) -> "DualState":
        z = np.zeros(grid.shape)
        return cls(z, np.zeros((grid.dim, *grid.shape)), z.copy() if split else None)


def _uses_split(problem: GradientFlowProblem, cfg: SolverConfig) -> bool:
    return cfg.convex_split and problem.energy.split is not None


@dataclass
class Linearization:
    """Mobility values/derivatives and the scaled smooth-energy gradient at one ``rho``."""

    values: np.ndarray
    derivs: np.ndarray
    egrad: np.ndarray

    @classmethod
    def at(cls, rho, rho_prev, problem: GradientFlowProblem, cfg: SolverConfig, dt: float):
        values, derivs = mobility_midpoint(rho, rho_prev, problem.mobility, problem.box)
        if _uses_split(problem, cfg):
            g = problem.energy.split.v_grad(rho)
        else:
            g = problem.energy.grad(rho)
        return cls(values, derivs, dt * np.asarray(g, dtype=float))


# --------------------------------------------------------------------------
# step-size bound


def stepsize_bound(box, rho_prev, mob: Mobility, samples: int = 10_000) -> float:
    """Upper bound on ``tau*sigma`` from the norm of the dual Jacobian.

    Implicit mobility: ``1 / max(1, max |M'(s)|^2 / 4)`` over ``s`` in the
    box, sampled on ``samples`` points plus the endpoints.  Semi-implicit
    mobility: the Jacobian entry is ``g(rho_n)``, so the bound is
    ``1 / max(1, max g(rho_n)^2)``.
    """
    lo, hi = float(box[0]), float(box[1])
    if mob.mode == "semi-implicit":
        _, d = mobility_midpoint(rho_prev, rho_prev, mob, box)
        peak = float(np.max(d * d)) if np.size(d) else 0.0
    else:
        s = np.concatenate([np.linspace(lo, hi, samples), [lo, hi]])
        peak = 0.25 * float(np.max(mob.deriv(s) ** 2))
    return 1.0 / max(1.0, peak)


def check_stepsize(cfg: SolverConfig, bound: float) -> bool:
    """True when ``tau*sigma <= bound``; otherwise emit :class:`CocoercivityWarning`."""
    prod = cfg.tau * cfg.sigma
    if prod <= bound * (1.0 + 1e-12):
        return True
    warnings.warn(
        f"tau*sigma = {prod:.6g} exceeds the step-size bound {bound:.6g}; "
        "the iteration may still converge but is not covered by the theory",
        CocoercivityWarning,
        stacklevel=2,
    )
    return False


# --------------------------------------------------------------------------
# one iteration


def dual_update(primal: PrimalState, duals: DualState, rho_prev, cfg: SolverConfig,
                problem: GradientFlowProblem, dt: float, lin: Optional[Linearization] = None):
    """Ascent on ``(phi, psi[, mu])`` at the reflected point, then the proximal map of ``F``."""
    grid = problem.grid
    if lin is None:
        lin = Linearization.at(primal.rho, rho_prev, problem, cfg, dt)
    sigma = cfg.sigma
    phi_half = duals.phi + sigma * (lin.derivs * (primal.rho_bar - primal.rho) + lin.values)
    psi_half = duals.psi + sigma * apply_avg(primal.m_bar, grid)
    phi, psi = project_parabola(phi_half, psi_half)
    mu = x = None
    if _uses_split(problem, cfg):
        part = problem.energy.split.convex
        mu_prev = duals.mu if duals.mu is not None else np.zeros(grid.shape)
        mu0 = mu_prev + sigma * primal.rho_bar
        mu = prox_conjugate_mu(mu0, sigma, dt, part, x0=duals.x)
        if not part.closed_form:
            x = (mu0 - mu) / sigma
    return DualState(phi, psi, mu, x)


def initial_duals(rho_prev, problem: GradientFlowProblem, cfg: SolverConfig, dt: float) -> DualState:
    """Zero ``(phi, psi)``; with splitting, ``mu = dt U'(rho_n)`` when defined, else zero.

    The consistent ``mu`` makes ``rho_n`` itself the first proximal point,
    which keeps Newton on the branch through ``rho_n`` when ``U'`` is not
    monotone.
    """
    duals = DualState.zeros(problem.grid, _uses_split(problem, cfg))
    if duals.mu is None:
        return duals
    part = problem.energy.split.convex
    if part.admissible(rho_prev):
        duals.mu = dt * np.asarray(part.grad(rho_prev), dtype=float)
        if not part.closed_form:
            duals.x = np.array(rho_prev, dtype=float, copy=True)
    return duals


def _rho_gradient(lin: Linearization, duals: DualState):
    """``d Phi / d rho`` without the ``mu`` term (linear in rho, cancels in differences)."""
    return lin.egrad + lin.derivs * duals.phi


def primal_update(primal: PrimalState, duals: DualState, rho_prev, cfg: SolverConfig,
                  problem: GradientFlowProblem, dt: float, lin: Optional[Linearization] = None,
                  qp_warm: Optional[ActiveSetState] = None):
    """Gradient step on ``(rho, m)``, projection, and reflection.

    Returns ``(new_state, linearization_at_new_rho, active_set_state)``.
    """
    grid = problem.grid
    if lin is None:
        lin = Linearization.at(primal.rho, rho_prev, problem, cfg, dt)
    tau = cfg.tau
    g_rho = _rho_gradient(lin, duals)
    mu_term = duals.mu if duals.mu is not None else 0.0
    rho_half = primal.rho - tau * (g_rho + mu_term)
    g_m = apply_avg_adjoint(duals.psi, grid)
    m_half = tuple(a - tau * b for a, b in zip(primal.m, g_m))
    rho_new, m_new, qp_state = prox_primal(rho_half, m_half, rho_prev, problem.box, grid,
                                           warm=qp_warm)

    lin_new = Linearization.at(rho_new, rho_prev, problem, cfg, dt)
    g_rho_new = _rho_gradient(lin_new, duals)
    rho_bar = 2.0 * rho_new - primal.rho - tau * (g_rho_new - g_rho)
    m_bar = tuple(2.0 * a - b for a, b in zip(m_new, primal.m))
    return PrimalState(rho_new, m_new, rho_bar, m_bar), lin_new, qp_state


# --------------------------------------------------------------------------
# driver


@dataclass
class WarmStart:
    """State carried from one minimizing-movement step to the next."""

    duals: Optional[DualState] = None
    qp: Optional[ActiveSetState] = None


@dataclass
class SaddleResult:
    rho: np.ndarray
    m: tuple
    iterations: int
    converged: bool
    rel_changes: list
    action: float
    warm: WarmStart = field(default_factory=WarmStart)

    @property
    def final_change(self) -> float:
        return self.rel_changes[-1] if self.rel_changes else 0.0


def _flat(rho, m):
    return np.concatenate([rho.ravel(), *(a.ravel() for a in m)])


def solve_saddle(rho_prev, problem: GradientFlowProblem, cfg: SolverConfig, dt: float,
                 warm: Optional[WarmStart] = None, callback=None) -> SaddleResult:
    """Iterate until ``|u+ - u| / |u+| <= tolerance`` or ``iter_max`` iterations.

    ``callback(iteration, primal, duals, rel_change)`` is called after each
    iteration when given.  Non-convergence is reported through
    ``SaddleResult.converged``; the last iterate is returned either way.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    grid = problem.grid
    rho_prev = problem.check_initial(rho_prev)
    split = _uses_split(problem, cfg)
    warm = warm or WarmStart()

    if cfg.cold_start:
        primal = PrimalState.start(np.zeros(grid.shape), grid)
        duals = DualState.zeros(grid, split)
        qp = None
    else:
        primal = PrimalState.start(rho_prev, grid)
        duals = warm.duals if warm.duals is not None else initial_duals(rho_prev, problem, cfg, dt)
        if split and duals.mu is None:
            duals = replace(duals, mu=np.zeros(grid.shape))
        qp = warm.qp

    lin = Linearization.at(primal.rho, rho_prev, problem, cfg, dt)
    u_old = _flat(primal.rho, primal.m)
    changes = []
    converged = False
    it = 0
    for it in range(1, cfg.iter_max + 1):
        duals = dual_update(primal, duals, rho_prev, cfg, problem, dt, lin)
        primal, lin, qp = primal_update(primal, duals, rho_prev, cfg, problem, dt, lin, qp)
        u_new = _flat(primal.rho, primal.m)
        unorm = np.linalg.norm(u_new)
        diff = np.linalg.norm(u_new - u_old)
        rel = diff / unorm if unorm > 0 else diff
        changes.append(rel)
        u_old = u_new
        if callback is not None:
            callback(it, primal, duals, rel)
        if rel <= cfg.tolerance:
            converged = True
            break

    act = action_value(primal.rho, rho_prev, primal.m, problem.mobility, grid, problem.box)
    return SaddleResult(primal.rho, primal.m, it, converged, changes, act, WarmStart(duals, qp))
