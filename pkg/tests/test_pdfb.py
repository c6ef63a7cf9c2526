import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from wgflow.grid import GridSpec, apply_div
from wgflow.pdfb import (
    CocoercivityWarning,
    DualState,
    PrimalState,
    SolverConfig,
    check_stepsize,
    dual_update,
    primal_update,
    solve_saddle,
    stepsize_bound,
)
from wgflow.physics import MOBILITIES, GradientFlowProblem, PorousMediumEnergy, QuadraticEnergy
from wgflow.prox import prox_primal

from conftest import dense_avg, dense_div, random_m


def mob(name, mode="implicit"):
    return MOBILITIES[name]().with_mode(mode)


class TestStepsizeBound:

    def test_linear(self):
        assert stepsize_bound((0.0, 1.0), np.zeros(3), mob("linear")) == 1.0

    def test_saturated(self):
        assert stepsize_bound((0.0, 1.0), np.zeros(3), mob("saturated")) == 1.0

    def test_cubic_on_zero_two(self):
        assert stepsize_bound((0.0, 2.0), np.zeros(3), mob("cubic")) == pytest.approx(1 / 36, rel=1e-14)

    def test_semi_implicit_uses_previous_density(self):
        # cubic mobility with frozen factor rho_n^2: Jacobian entry rho_n^2
        prev = np.array([0.5, 1.5, 2.0])
        assert stepsize_bound((0.0, 1e6), prev, mob("cubic", "semi-implicit")) == pytest.approx(1 / 16)
        assert stepsize_bound((0.0, 1.0), prev, mob("saturated", "semi-implicit")) == 1.0

    def test_check_warns(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert check_stepsize(SolverConfig(tau=0.2), 1.0)
        with pytest.warns(CocoercivityWarning):
            assert not check_stepsize(SolverConfig(tau=1.0, sigma=2.0), 1.0)

    def test_config_defaults(self):
        cfg = SolverConfig(tau=0.2)
        assert cfg.sigma == 5.0
        with pytest.raises(ValueError):
            SolverConfig(tau=-1.0)


def problem(grid, mobility="linear", energy=None, box=(0.0, 1e6)):
    return GradientFlowProblem(grid, mob(mobility), energy or QuadraticEnergy(grid, 1.0), box)


class TestDualUpdate:

    def test_zero_state_stays_at_origin(self):
        g = GridSpec(1, 4, 0.25)
        p = problem(g)
        rho_prev = np.zeros(4)
        duals = dual_update(PrimalState.start(rho_prev, g), DualState.zeros(g, False), rho_prev,
                            SolverConfig(tau=1.0), p, 0.1)
        assert_array_equal(duals.phi, 0.0)
        assert_array_equal(duals.psi, 0.0)

    def test_linear_mobility_is_affine(self, rng):
        # deep inside the parabola set the projection is inactive, so phi
        # moves by exactly sigma * (rho_bar/2 + rho_n/2)
        g = GridSpec(1, 5, 0.2)
        p = problem(g)
        rho_prev = rng.uniform(0.2, 0.8, 5)
        rho = rng.uniform(0.2, 0.8, 5)
        rho_bar = rng.uniform(0.2, 0.8, 5)
        primal = PrimalState(rho, g.zeros_momentum(), rho_bar, g.zeros_momentum())
        duals = DualState(np.full(5, -100.0), np.zeros((1, 5)))
        out = dual_update(primal, duals, rho_prev, SolverConfig(tau=0.5), p, 0.1)
        assert_allclose(out.phi, -100.0 + 2.0 * (0.5 * rho_bar + 0.5 * rho_prev), rtol=1e-14)

    def test_feasible_after_update(self, rng):
        g = GridSpec(2, 6, 1 / 6)
        p = problem(g, "saturated", box=(0.0, 1.0))
        rho_prev = rng.uniform(0.1, 0.9, g.shape)
        primal = PrimalState(rng.uniform(0, 1, g.shape), random_m(g, rng),
                             rng.uniform(0, 1, g.shape), random_m(g, rng))
        duals = DualState(rng.standard_normal(g.shape), rng.standard_normal((2, *g.shape)))
        out = dual_update(primal, duals, rho_prev, SolverConfig(tau=0.3), p, 0.1)
        assert np.all(out.phi + 0.5 * np.sum(out.psi**2, axis=0) <= 1e-12)


class TestPrimalUpdate:

    def test_zero_duals_zero_energy_is_projection(self, rng):
        g = GridSpec(1, 6, 1 / 6)
        p = problem(g, energy=QuadraticEnergy(g, 0.0))
        rho_prev = rng.uniform(0.2, 0.8, 6)
        rho = rho_prev + 0.1 * rng.standard_normal(6)
        m = random_m(g, rng)
        state = PrimalState(rho, m, rho.copy(), m)
        new, _, _ = primal_update(state, DualState.zeros(g, False), rho_prev, SolverConfig(tau=0.7), p, 0.1)
        ref_rho, ref_m, _ = prox_primal(rho, m, rho_prev, p.box, g)
        assert_allclose(new.rho, ref_rho, atol=1e-14)
        assert_allclose(new.m[0], ref_m[0], atol=1e-14)

    def test_constant_gradient_plain_reflection(self, rng):
        g = GridSpec(1, 6, 1 / 6)
        p = problem(g, energy=QuadraticEnergy(g, 0.0, np.linspace(-1, 1, 6)))
        rho_prev = rng.uniform(0.2, 0.8, 6)
        state = PrimalState(rho_prev.copy(), random_m(g, rng), rho_prev.copy(), g.zeros_momentum())
        duals = DualState(-rng.uniform(0, 1, 6), 0.1 * rng.standard_normal((1, 6)))
        new, _, _ = primal_update(state, duals, rho_prev, SolverConfig(tau=0.4), p, 0.1)
        assert_allclose(new.rho_bar, 2 * new.rho - state.rho, atol=1e-14)
        assert_allclose(new.m_bar[0], 2 * new.m[0] - state.m[0], atol=1e-14)

    def test_primal_feasibility_every_iteration(self, rng):
        g = GridSpec(2, 8, 1 / 8)
        p = problem(g, "saturated", QuadraticEnergy(g, 1.0, rng.standard_normal(g.shape)), (0.0, 1.0))
        rho_prev = rng.uniform(0.05, 0.95, g.shape)
        seen = []

        def check(it, primal, duals, rel):
            assert np.all(duals.phi + 0.5 * np.sum(duals.psi**2, axis=0) <= 1e-12)
            assert np.linalg.norm(primal.rho - rho_prev + apply_div(primal.m, g)) <= 1e-9
            assert np.all((primal.rho >= 0.0) & (primal.rho <= 1.0))
            seen.append(rel)

        solve_saddle(rho_prev, p, SolverConfig(tau=1.0, iter_max=60), 0.05, callback=check)
        assert len(seen) > 1


def scalar_reference(rho_prev, dt, tau, sigma, coef, iters, tol):
    """One cell, saturated mobility, quadratic energy, started from zero.

    The only feasible density is ``rho_n`` and there are no faces, so the
    iteration reduces to scalars.  Stops on the same relative-change rule.
    """
    M = lambda r: r * (1 - r)
    dM = lambda r: 0.5 * (1 - 2 * r)  # derivative of M((r + rho_n)/2) in r
    rho, rho_bar, phi = 0.0, 0.0, 0.0
    out = []
    for _ in range(iters):
        mid = 0.5 * (rho + rho_prev)
        d = dM(mid)
        phi = min(phi + sigma * (d * (rho_bar - rho) + M(mid)), 0.0)
        g_old = dt * coef * rho + d * phi
        rho_new = rho_prev
        d_new = dM(0.5 * (rho_new + rho_prev))
        g_new = dt * coef * rho_new + d_new * phi
        rho_bar = 2 * rho_new - rho - tau * (g_new - g_old)
        change = abs(rho_new - rho) / abs(rho_new)
        rho = rho_new
        out.append((phi, rho_bar, rho))
        if change <= tol:
            break
    return out


def test_single_cell_scalar_reference():
    g = GridSpec(1, 1, 1.0)
    p = problem(g, "saturated", QuadraticEnergy(g, 3.0), (0.0, 1.0))
    cfg = SolverConfig(tau=0.5, sigma=2.0, tolerance=1e-12, iter_max=25, cold_start=True)
    got = []
    sol = solve_saddle(np.array([0.3]), p, cfg, 0.1,
                       callback=lambda it, pr, du, rel: got.append((du.phi[0], pr.rho_bar[0], pr.rho[0])))
    ref = scalar_reference(0.3, 0.1, 0.5, 2.0, 3.0, 25, 1e-12)
    assert sol.converged and sol.iterations == len(ref)
    assert_allclose(np.array(got), np.array(ref), rtol=0, atol=1e-14)


def two_cell_oracle(rho_prev, dt, h, iters=1_000_000):
    """Projected gradient on the face flux of a two-cell porous-media step.

    Continuity gives ``rho = rho_n -+ m/h``; the objective is
    ``dt (rho_1^2 + rho_2^2) + sum_i (m/2)^2 / (2 M_i)`` with
    ``M_i = (rho_i + rho_n,i)/2``, and ``m`` is confined so both densities
    stay non-negative.
    """
    a, b = rho_prev

    def grad(m):
        r1, r2 = a - m / h, b + m / h
        m1, m2 = 0.5 * (r1 + a), 0.5 * (r2 + b)
        w2 = 0.25 * m * m
        g = dt * (-2 * r1 / h + 2 * r2 / h)
        g += 0.25 * m / m1 + w2 / (2 * m1 * m1) * (0.5 / h)
        g += 0.25 * m / m2 - w2 / (2 * m2 * m2) * (0.5 / h)
        return g

    lo, hi = -b * h, a * h
    m, step = 0.0, 0.05
    for _ in range(iters):
        m_new = min(max(m - step * grad(m), lo), hi)
        if abs(m_new - m) <= 1e-16:
            break
        m = m_new
    return np.array([a - m / h, b + m / h]), m


def test_two_cell_porous_step():
    g = GridSpec(1, 2, 0.5)
    rho_prev = np.array([0.9, 0.2])
    p = problem(g, energy=PorousMediumEnergy(g))
    sol = solve_saddle(rho_prev, p, SolverConfig(tau=1.0, tolerance=1e-13, iter_max=200000), 0.05)
    ref_rho, ref_m = two_cell_oracle(rho_prev, 0.05, 0.5)
    assert sol.converged
    assert_allclose(sol.rho, ref_rho, atol=1e-6)
    assert_allclose(sol.m[0], [ref_m], atol=1e-6)


def test_constant_density_is_stationary():
    g = GridSpec(1, 20, 0.1)
    p = problem(g, energy=PorousMediumEnergy(g))
    rho_prev = np.full(20, 0.4)
    sol = solve_saddle(rho_prev, p, SolverConfig(tau=1.0, tolerance=1e-10), 0.01)
    assert sol.converged and sol.iterations <= 5
    assert_allclose(sol.rho, rho_prev, atol=1e-10)
    assert sol.action == pytest.approx(0.0, abs=1e-20)


def test_relative_change_trend():
    g = GridSpec.from_box(-1.0, 1.0, 0.05)
    (x,) = g.cell_centers()
    rho_prev = np.maximum(0.5 - x * x, 0.0) + 0.01
    p = problem(g, energy=PorousMediumEnergy(g))
    sol = solve_saddle(rho_prev, p, SolverConfig(tau=1.0, tolerance=1e-6), 1e-3)
    assert sol.converged
    assert sol.final_change < sol.rel_changes[0]


def test_nonconvergence_is_reported():
    g = GridSpec.from_box(-1.0, 1.0, 0.05)
    (x,) = g.cell_centers()
    p = problem(g, energy=PorousMediumEnergy(g))
    sol = solve_saddle(np.maximum(0.5 - x * x, 0.0) + 0.01, p, SolverConfig(tau=1.0, tolerance=1e-12, iter_max=3), 1e-3)
    assert not sol.converged and sol.iterations == 3 and len(sol.rel_changes) == 3


def test_rejects_bad_time_step():
    g = GridSpec(1, 2, 1.0)
    with pytest.raises(ValueError):
        solve_saddle(np.ones(2), problem(g), SolverConfig(tau=1.0), 0.0)


def project_parabola_cubic(phi0, psi0):
    """Pointwise projection onto ``phi + psi^2/2 <= 0`` through the multiplier cubic.

    Outside the set the multiplier ``l >= 0`` solves
    ``(1 + l)^2 (phi0 - l) + psi0^2/2 = 0``; the root from ``numpy.roots``
    is polished by two Newton steps.
    """
    phi, psi = phi0.copy(), psi0.copy()
    for i in range(phi0.size):
        a, b = phi0[i], psi0[i]
        if a + 0.5 * b * b <= 0:
            continue
        coeffs = [-1.0, a - 2.0, 2.0 * a - 1.0, a + 0.5 * b * b]
        roots = np.roots(coeffs)
        lam = max(r.real for r in roots if abs(r.imag) < 1e-9 and r.real > -1e-12)
        for _ in range(2):
            f = np.polyval(coeffs, lam)
            lam -= f / np.polyval(np.polyder(coeffs), lam)
        phi[i], psi[i] = a - lam, b / (1.0 + lam)
    return phi, psi


def pd3o_reference(rho_prev, g, dt, coef, pot, tau, sigma, iters):
    """Dense PD3O for linear mobility and quadratic energy on a 1D grid.

    ``x = (rho, m)``, ``K x = (rho/2, I m)`` with offset ``(rho_n/2, 0)``,
    ``f(x) = dt E(rho)`` and the primal constraint is the continuity
    equation (the box never activates in this setting).
    """
    n = g.size
    a, b = dense_div(g), dense_avg(g)
    c = np.hstack([np.eye(n), a])
    proj = np.eye(c.shape[1]) - c.T @ np.linalg.solve(c @ c.T, c)
    shift = c.T @ np.linalg.solve(c @ c.T, rho_prev)
    k = np.block([[0.5 * np.eye(n), np.zeros((n, a.shape[1]))], [np.zeros((n, n)), b]])
    off = np.concatenate([0.5 * rho_prev, np.zeros(n)])

    def grad_f(x):
        out = np.zeros_like(x)
        out[:n] = dt * (coef * x[:n] + pot)
        return out

    x = np.concatenate([rho_prev, np.zeros(a.shape[1])])
    x_bar = x.copy()
    s = np.zeros(2 * n)
    out = []
    for _ in range(iters):
        v = s + sigma * (k @ x_bar + off)
        s = np.concatenate(project_parabola_cubic(v[:n], v[n:]))
        y = x - tau * grad_f(x) - tau * k.T @ s
        x_new = proj @ y + shift
        assert np.all(x_new[:n] > 0)
        x_bar = 2 * x_new - x + tau * grad_f(x) - tau * grad_f(x_new)
        x = x_new
        out.append(np.concatenate([x, s]))
    return out


def test_linear_mobility_matches_pd3o():
    g = GridSpec(1, 16, 1 / 16)
    (xc,) = g.cell_centers()
    rho_prev = 0.5 + 0.3 * np.sin(2 * np.pi * xc)
    pot = xc - 0.5
    p = problem(g, energy=QuadraticEnergy(g, 1.0, pot))
    got = []

    def record(it, primal, duals, rel):
        got.append(np.concatenate([primal.rho, primal.m[0], duals.phi, duals.psi[0]]))

    cfg = SolverConfig(tau=1.0, tolerance=1e-300, iter_max=100)
    solve_saddle(rho_prev, p, cfg, 0.1, callback=record)
    ref = pd3o_reference(rho_prev, g, 0.1, 1.0, pot, 1.0, 1.0, 100)
    assert len(got) == 100
    worst = max(np.max(np.abs(u - v)) for u, v in zip(got, ref))
    assert worst <= 1e-12
