"""Proximal operators used by the primal-dual iteration.

* :func:`project_parabola` -- pointwise projection of the dual pair
  ``(phi, psi)`` onto ``{phi + |psi|^2/2 <= 0}``;
* :func:`prox_conjugate_mu` -- proximal map of the conjugate of the convex
  energy part, by Newton on the conjugate or through Moreau's identity;
* :func:`prox_primal` -- Euclidean projection onto the discrete continuity
  constraint with box bounds, by a primal-dual active set method whose
  inner saddle systems are solved with block-Jacobi PCG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import (
    GridSpec,
    apply_avg,
    apply_div,
    apply_div_adjoint,
    div_divT,
    pcg,
    solve_identity_plus_div_divT,
)
from .physics import Mobility, mobility_midpoint

__all__ = [
    "NewtonError",
    "InfeasibleError",
    "ActiveSetCycleError",
    "ActiveSetState",
    "project_parabola",
    "prox_conjugate_mu",
    "prox_primal",
    "action_value",
]


class NewtonError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class InfeasibleError(ValueError):
    pass


class ActiveSetCycleError(RuntimeError):
    def __init__(self, message, lower=None, upper=None):
        super().__init__(message)
        self.lower, self.upper = lower, upper


# --------------------------------------------------------------------------
# dual projection


def project_parabola(phi0, psi0, tol=1e-14, max_iter=60):
    """Project ``(phi0, psi0)`` onto ``K = {(phi, psi): phi + |psi|^2/2 <= 0}``.

    ``phi0`` has any shape ``S``; ``psi0`` has shape ``(d, *S)``.  Points
    already in ``K`` are returned unchanged.  Otherwise the multiplier is the
    largest root of ``(1 + l)^2 (phi0 - l) + |psi0|^2/2``, found by Newton
    from the right (where the cubic is decreasing and concave) with a
    bisection fallback, and the projection is
    ``(phi0 - l, psi0 / (1 + l))``.
    """
    phi0 = np.asarray(phi0, dtype=float)
    psi0 = np.asarray(psi0, dtype=float)
    if psi0.shape[1:] != phi0.shape:
        raise ValueError(f"psi shape {psi0.shape} incompatible with phi shape {phi0.shape}")
    phi = phi0.copy()
    psi = psi0.copy()
    nrm2 = np.sum(psi0 * psi0, axis=0)
    out = phi0 + 0.5 * nrm2 > 0
    if not np.any(out):
        return phi, psi

    f0 = phi0[out]
    c = 0.5 * nrm2[out]
    lo = np.maximum(f0, 0.0)
    hi = lo + np.sqrt(nrm2[out]) + 1.0
    lam = hi.copy()
    done = np.zeros(lam.shape, dtype=bool)
    for _ in range(max_iter):
        a = 1.0 + lam
        g = a * a * (f0 - lam) + c
        dg = a * (2.0 * f0 - 1.0 - 3.0 * lam)
        step = np.where(done, 0.0, g / dg)
        lam = lam - step
        done |= np.abs(step) <= tol * (1.0 + np.abs(lam))
        if done.all():
            break
    bad = ~done | ~np.isfinite(lam) | (lam < lo)
    if np.any(bad):
        lam[bad] = _bisect_cubic(f0[bad], c[bad], lo[bad], hi[bad])

    phi_new = f0 - lam
    psi_new = psi0[:, out] / (1.0 + lam)
    # round-off guard: land on the boundary, never outside
    phi_new = np.minimum(phi_new, -0.5 * np.sum(psi_new * psi_new, axis=0))
    phi[out] = phi_new
    psi[:, out] = psi_new
    return phi, psi


def _bisect_cubic(f0, c, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        g = (1.0 + mid) ** 2 * (f0 - mid) + c
        lo = np.where(g > 0, mid, lo)
        hi = np.where(g > 0, hi, mid)
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# conjugate proximal


def prox_conjugate_mu(mu0, sigma, dt, part, tol=1e-10, max_newton=100, x0=None):
    """``argmin_mu sigma*dt*U*(mu/dt) + |mu - mu0|^2 / 2``.

    With a closed-form conjugate (``part.closed_form``) Newton is applied
    to ``sigma U*'(mu/dt) + mu - mu0 = 0`` from ``mu0``.  Otherwise the
    Moreau identity reduces the problem to ``dt U'(x) + sigma x = mu0``,
    solved by Newton from ``mu0/sigma`` (or from ``x0`` when given), and
    ``mu = mu0 - sigma x``.  For a non-monotone ``U'`` the equation can have
    several roots; ``x0`` then selects the branch Newton follows.
    In the first case Newton is safeguarded by bisection on a bracket of
    the root; in the second, steps are halved while they increase the
    residual or leave the domain of ``U'``.
    """
    if not (sigma > 0 and dt > 0):
        raise ValueError("sigma and dt must be positive")
    mu0 = np.asarray(mu0, dtype=float)
    target = tol * (1.0 + np.linalg.norm(mu0))
    if part.closed_form:
        return _newton_conjugate(mu0, sigma, dt, part, target, max_newton)
    x = _newton_moreau(mu0, sigma, dt, part, target, max_newton, x0)
    return mu0 - sigma * x


def _newton_conjugate(mu0, sigma, dt, part, target, max_newton):
    # The residual is increasing in mu, and the root lies in
    # [mu0 - sigma U*'(mu0/dt), mu0].  Newton steps that leave the bracket or
    # fail to halve the residual give way to bisection, which matters
    # where the exponential makes plain Newton crawl in steps of ~dt.
    def residual(m):
        return sigma * part.conj_grad(m / dt) + m - mu0

    hi = mu0.copy()
    lo = mu0 - sigma * part.conj_grad(mu0 / dt)
    mu = mu0.copy()
    if hasattr(part, "initial_guess"):
        mu = np.clip(part.initial_guess(mu0, sigma, dt), lo, hi)
    res = residual(mu)
    for _ in range(max_newton):
        if np.linalg.norm(res) <= target:
            return mu
        hi = np.where(res > 0, mu, hi)
        lo = np.where(res < 0, mu, lo)
        hess = (sigma / dt) * part.conj_hess(mu / dt) + 1.0
        trial = mu - res / hess
        outside = (trial < lo) | (trial > hi)
        trial = np.where(outside, 0.5 * (lo + hi), trial)
        res_trial = residual(trial)
        slow = ~outside & (np.abs(res_trial) > 0.5 * np.abs(res))
        if slow.any():
            mid = 0.5 * (lo + hi)
            res_mid = residual(mid)
            take = slow & (np.abs(res_mid) < np.abs(res_trial))
            trial = np.where(take, mid, trial)
            res_trial = np.where(take, res_mid, res_trial)
        mu, res = trial, res_trial
    nres = np.linalg.norm(res)
    if nres <= target:
        return mu
    raise NewtonError("conjugate proximal Newton did not converge", nres)


def _newton_moreau(mu0, sigma, dt, part, target, max_newton, x0=None):
    if hasattr(part, "scaled_residual"):
        return _newton_moreau_scaled(mu0, sigma, dt, part, target, max_newton, x0)
    x = mu0 / sigma if x0 is None else np.array(x0, dtype=float, copy=True)
    if not part.admissible(x):
        span = part.upper - part.lower
        margin = 1e-6 * (span if np.isfinite(span) else 1.0)
        x = np.clip(x, part.lower + margin, part.upper - margin)

    def residual(v):
        return dt * part.grad(v) + sigma * v - mu0

    res = residual(x)
    nres = np.linalg.norm(res)
    for _ in range(max_newton):
        if nres <= target:
            return x
        step = part.newton_step(x, res, sigma, dt)
        t = 1.0
        for _ in range(60):
            trial = x - t * step
            if part.admissible(trial):
                res_trial = residual(trial)
                n_trial = np.linalg.norm(res_trial)
                if n_trial < nres or t < 1e-12:
                    break
            t *= 0.5
        else:
            raise NewtonError("Newton line search failed in the Moreau proximal", nres)
        x, res, nres = trial, res_trial, n_trial
    if nres <= target:
        return x
    raise NewtonError("Moreau proximal Newton did not converge", nres)


def _newton_moreau_scaled(mu0, sigma, dt, part, target, max_newton, x0=None):
    # Multiplying by the square of the singular denominator leaves the
    # gradient of a polynomial f on the closed box.  Past the fold of the
    # potential no interior root exists and the solution sits on the bound,
    # so x is taken as a local minimizer of f over the box, found by
    # projected Newton with a convexified Hessian and an Armijo search on f.
    # Convergence is measured by the projected residual x - clip(x - r).
    lo, hi = part.lower, part.upper
    x = mu0 / sigma if x0 is None else np.array(x0, dtype=float, copy=True)
    x = np.clip(x, lo, hi)
    fx = part.scaled_objective(x, mu0, sigma, dt)
    floor = 1e-8 * sigma
    nres = np.inf
    for _ in range(max_newton):
        r = part.scaled_residual(x, mu0, sigma, dt)
        proj = x - np.clip(x - r, lo, hi)
        nres = np.linalg.norm(proj)
        if nres <= target:
            return x
        eps_act = min(1e-3, nres)
        active = ((x <= lo + eps_act) & (r > 0)) | ((x >= hi - eps_act) & (r < 0))
        diag = np.maximum(part.scaled_hessian_diag(x, mu0, sigma, dt), floor)
        step = part.scaled_newton_step(diag, np.where(active, 0.0, r), ~active, dt)
        step = np.where(active, r, step)
        t = 1.0
        for _ in range(60):
            trial = np.clip(x - t * step, lo, hi)
            f_trial = part.scaled_objective(trial, mu0, sigma, dt)
            decrease = np.sum(np.where(active, r * (x - trial), t * r * step))
            if fx - f_trial >= 1e-4 * decrease:
                break
            if decrease <= 1e-12 * (1.0 + abs(fx)):
                # f is flat to round-off; judge the step by the residual instead
                r_trial = part.scaled_residual(trial, mu0, sigma, dt)
                if np.linalg.norm(trial - np.clip(trial - r_trial, lo, hi)) < nres:
                    break
            t *= 0.5
        else:
            raise NewtonError("Newton line search failed in the Moreau proximal", nres)
        x, fx = trial, f_trial
    if nres <= target:
        return x
    raise NewtonError("Moreau proximal Newton did not converge", nres)


# --------------------------------------------------------------------------
# primal projection


@dataclass
class ActiveSetState:
    """Active sets and multipliers of the box-constrained projection."""

    lower: np.ndarray
    upper: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    outer_iterations: int = 0
    pcg_iterations: list = field(default_factory=list)

    @classmethod
    def empty(cls, grid: GridSpec) -> "ActiveSetState":
        z = np.zeros(grid.shape)
        return cls(np.zeros(grid.shape, bool), np.zeros(grid.shape, bool), z, z.copy())


def prox_primal(rho0, m0, rho_prev, box, grid: GridSpec, warm: Optional[ActiveSetState] = None,
                rtol=1e-11, max_pcg=500, max_outer=100, atol=1e-11):
    """Project ``(rho0, m0)`` onto ``{rho - rho_prev + A m = 0, lo <= rho <= hi}``.

    Returns ``(rho, m, state)``.  Each active-set iteration solves the
    reduced saddle system through its Schur complement ``J J^T y = J x0 - y0``
    with PCG; the preconditioner is ``blockdiag(I + A A^T, I)`` and its first
    block is inverted by the DCT.  The loop stops when the active sets
    repeat.  If it revisits an earlier pair of sets, pins a total mass the
    continuity equation cannot match, or hits ``max_outer``, the projection
    is finished by a globalized Newton method on the dual
    (:func:`_dual_newton`); only a failure there raises
    :class:`ActiveSetCycleError`.
    """
    lo, hi = float(box[0]), float(box[1])
    if not lo < hi:
        raise ValueError(f"box bounds must satisfy lower < upper, got {box}")
    rho0 = grid.check_density(rho0)
    rho_prev = grid.check_density(rho_prev)
    m0 = grid.check_momentum(m0)
    total = float(np.sum(rho_prev))
    slack = 1e-12 * max(1.0, abs(total))
    if total < lo * grid.size - slack or total > hi * grid.size + slack:
        raise InfeasibleError(
            f"mass {total * grid.cell_volume} cannot fit in box [{lo}, {hi}] on {grid.size} cells"
        )

    state = warm if warm is not None else ActiveSetState.empty(grid)
    lower, upper = state.lower.copy(), state.upper.copy()
    eta, lam = state.eta.copy(), state.lam.copy()
    eta_start = eta.copy()
    rhs_eta = (rho0 + apply_div(m0, grid) - rho_prev).ravel()
    shape = grid.shape
    n = grid.size
    pcg_counts = []
    seen = set()
    slack_as = 1e-10 * (1.0 + float(np.max(np.abs(rho0))))

    for outer in range(1, max_outer + 1):
        active = (lower | upper).ravel()
        bound = np.where(lower, lo, hi).ravel()[active]
        b = np.concatenate([rhs_eta, rho0.ravel()[active] - bound])

        def matvec(y):
            e = y[:n]
            la = y[n:]
            top = e + div_divT(e.reshape(shape), grid).ravel()
            top[active] += la
            return np.concatenate([top, e[active] + la])

        def precond(r):
            top = solve_identity_plus_div_divT(r[:n].reshape(shape), grid).ravel()
            return np.concatenate([top, r[n:]])

        y0 = np.concatenate([eta.ravel(), lam.ravel()[active]])
        y, its, _ = pcg(matvec, b, precond, x0=y0, rtol=rtol, maxiter=max_pcg, atol=atol)
        pcg_counts.append(its)

        eta = y[:n].reshape(shape)
        lam = np.zeros(n)
        lam[active] = y[n:]
        lam = lam.reshape(shape)
        rho = rho0 - eta - lam
        rho[lower] = lo
        rho[upper] = hi
        m = tuple(a - b_ for a, b_ in zip(m0, apply_div_adjoint(eta, grid)))
        # an active set with the wrong total mass makes the linear system
        # inconsistent; no later update of the sets repairs that reliably
        if np.linalg.norm(rho + apply_div(m, grid) - rho_prev) > 1e-8 * (1.0 + np.linalg.norm(rho_prev)):
            break

        # a small hysteresis keeps round-off in the inner solve from
        # toggling degenerate cells (lambda + rho - bound ~ 0) back and forth
        c_lo = lam + rho - lo
        c_hi = lam + rho - hi
        new_lower = np.where(lower, c_lo < slack_as, c_lo < -slack_as)
        new_upper = np.where(upper, c_hi > -slack_as, c_hi > slack_as) & ~new_lower
        if np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper):
            return rho, m, ActiveSetState(lower, upper, eta, lam, outer, pcg_counts)
        key = (np.packbits(new_lower).tobytes(), np.packbits(new_upper).tobytes())
        if key in seen:
            break
        seen.add((np.packbits(lower).tobytes(), np.packbits(upper).tobytes()))
        lower, upper = new_lower, new_upper

    # The plain active-set loop is not globally convergent for this
    # (non M-matrix) problem.  On a cycle, an inconsistent active set or at
    # the cap, switch to the dual, restarting from the incoming multiplier
    # since the one of a bad active set can be far off.
    try:
        rho, m, eta, its = _dual_newton(rho0, m0, rho_prev, lo, hi, grid, eta_start, atol, rtol, max_pcg)
    except ArithmeticError as exc:
        raise ActiveSetCycleError(
            f"active-set iteration stalled after {outer} steps and the dual fallback failed: {exc}",
            new_lower, new_upper,
        ) from None
    lower, upper = rho <= lo, (rho >= hi) & ~(rho <= lo)
    lam = rho0 - eta - rho
    lam[~(lower | upper)] = 0.0
    pcg_counts.extend(its)
    return rho, m, ActiveSetState(lower, upper, eta, lam, outer, pcg_counts)


def _dual_newton(rho0, m0, rho_prev, lo, hi, grid, eta, atol, rtol, max_pcg, max_iter=200):
    """Maximize the concave dual in the continuity multiplier ``eta``.

    For fixed ``eta`` the Lagrangian is minimized by ``rho = clip(rho0 - eta)``
    and ``m = m0 - A^T eta``; the dual gradient is the continuity residual.
    Semismooth Newton steps solve ``(D + A A^T) d = residual`` with ``D``
    the free-cell indicator and are globalized by an Armijo search on the
    dual value, which makes the iteration convergent from any start.
    """
    shape = grid.shape

    def primal(e):
        r = np.clip(rho0 - e, lo, hi)
        mm = tuple(a - b for a, b in zip(m0, apply_div_adjoint(e, grid)))
        return r, mm

    def dual_value(e, r, mm):
        val = 0.5 * np.sum((r - rho0) ** 2) + 0.5 * sum(np.sum((a - b) ** 2) for a, b in zip(mm, m0))
        return val + float(np.sum(e * (r + apply_div(mm, grid) - rho_prev)))

    rho, m = primal(eta)
    grad = rho + apply_div(m, grid) - rho_prev
    q = dual_value(eta, rho, m)
    its = []
    for _ in range(max_iter):
        if np.linalg.norm(grad) <= atol:
            return rho, m, eta, its
        free = ((rho0 - eta > lo) & (rho0 - eta < hi)).astype(float)
        # tiny shift keeps the all-active system (singular on constants) solvable
        diag = free + 1e-12

        def matvec(v):
            v = v.reshape(shape)
            return (diag * v + div_divT(v, grid)).ravel()

        def precond(r):
            return solve_identity_plus_div_divT(r.reshape(shape), grid).ravel()

        d, k, _ = pcg(matvec, grad.ravel(), precond, rtol=rtol, maxiter=max_pcg)
        its.append(k)
        d = d.reshape(shape)
        slope = float(np.sum(grad * d))
        t = 1.0
        for _ in range(60):
            e_new = eta + t * d
            r_new, m_new = primal(e_new)
            q_new = dual_value(e_new, r_new, m_new)
            if q_new >= q + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise ArithmeticError("dual line search failed")
        eta, rho, m, q = e_new, r_new, m_new, q_new
        grad = rho + apply_div(m, grid) - rho_prev
    raise ArithmeticError(f"dual Newton did not converge (residual {np.linalg.norm(grad):.3e})")


# --------------------------------------------------------------------------
# action diagnostic


def action_value(rho, rho_prev, m, mob: Mobility, grid: GridSpec, box=None,
                 flux_rtol: float = 1e-8) -> float:
    """Discrete action ``sum_i f(M_i, (I m)_i) h^d`` with ``f = |m|^2 / (2M)``.

    Returns ``inf`` where the mobility vanishes under a non-zero flux.
    Fluxes below ``flux_rtol`` times the largest one count as zero there,
    since projections leave round-off sized fluxes in empty cells.
    """
    values, _ = mobility_midpoint(rho, rho_prev, mob, box)
    w = apply_avg(m, grid)
    flux2 = np.sum(w * w, axis=0)
    pos = values > 0
    cut = (flux_rtol**2) * float(np.max(flux2, initial=0.0))
    if np.any(~pos & (flux2 > cut)):
        return float("inf")
    return float(np.sum(flux2[pos] / (2.0 * values[pos]))) * grid.cell_volume
