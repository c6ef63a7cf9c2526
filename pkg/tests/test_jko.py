import numpy as np
import pytest
from numpy.testing import assert_array_equal

from wgflow.grid import GridSpec
from wgflow.jko import StepDiagnostics, StepFailure, TimeLoopSpec, check_structure, diagnose, run
from wgflow.pdfb import SolverConfig
from wgflow.physics import MOBILITIES, GradientFlowProblem, PorousMediumEnergy


def porous(g):
    return GradientFlowProblem(g, MOBILITIES["linear"](), PorousMediumEnergy(g), (0.0, 1e6))


def bump(g):
    (x,) = g.cell_centers()
    return np.maximum(0.25 - x * x, 0.0) * 4.0


class TestTimeLoop:

    def test_step_count_tolerates_round_off(self):
        assert TimeLoopSpec(5e-4, 0.05).n_steps == 100
        assert TimeLoopSpec(0.1, 0.3).n_steps == 3
        assert TimeLoopSpec(0.1, 0.0).n_steps == 0

    @pytest.mark.parametrize("kw", [dict(dt=0.0, t_end=1.0), dict(dt=0.1, t_end=-1.0),
                                    dict(dt=1e-9, t_end=1.0, max_steps=10)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TimeLoopSpec(**kw)


class TestRun:

    def test_zero_steps_returns_initial(self):
        g = GridSpec.from_box(-1.0, 1.0, 0.1)
        rho0 = bump(g)
        res = run(rho0, porous(g), SolverConfig(tau=1.0), TimeLoopSpec(1e-3, 0.0))
        assert_array_equal(res.rho, rho0)
        assert res.steps == []

    def test_structure_on_short_run(self):
        g = GridSpec.from_box(-1.0, 1.0, 0.05)
        p = porous(g)
        calls = []
        res = run(bump(g), p, SolverConfig(tau=1.0, tolerance=1e-6), TimeLoopSpec(1e-3, 5e-3, 2),
                  sink=lambda d, rho, snap: calls.append((d.step, snap)))
        assert [c[0] for c in calls] == [0, 1, 2, 3, 4, 5]
        assert [c[1] for c in calls] == [True, False, True, False, True, True]
        rep = check_structure(res.initial, res.steps, p.box, 1e-6, dt=1e-3)
        assert rep.ok, rep.violations
        assert rep.max_mass_drift <= 1e-10
        assert all(d.min_rho >= -1e-12 for d in res.steps)

    def test_energy_dissipation_with_action(self):
        g = GridSpec.from_box(-1.0, 1.0, 0.05)
        res = run(bump(g), porous(g), SolverConfig(tau=1.0, tolerance=1e-7), TimeLoopSpec(1e-3, 3e-3))
        prev = res.initial.energy
        for d in res.steps:
            assert d.action > 0
            assert d.energy + d.action / 1e-3 <= prev + 1e-6
            prev = d.energy

    def test_nonconvergence_flagged_or_strict(self):
        g = GridSpec.from_box(-1.0, 1.0, 0.1)
        cfg = SolverConfig(tau=1.0, tolerance=1e-14, iter_max=2)
        res = run(bump(g), porous(g), cfg, TimeLoopSpec(1e-3, 2e-3))
        assert not res.all_converged and len(res.steps) == 2
        with pytest.raises(StepFailure) as info:
            run(bump(g), porous(g), cfg, TimeLoopSpec(1e-3, 2e-3), strict=True)
        assert info.value.step == 1

    def test_initial_outside_box(self):
        g = GridSpec(1, 4, 0.5)
        with pytest.raises(ValueError):
            run(np.full(4, -1.0), porous(g), SolverConfig(tau=1.0), TimeLoopSpec(0.1, 0.1))


def diag(step, energy, mass, lo=0.0, hi=1.0):
    return StepDiagnostics(step, 0.1 * step, energy, mass, lo, hi)


class TestCheckStructure:

    def test_stationary_series(self):
        d0 = diag(0, 1.5, 2.0)
        rep = check_structure(d0, [diag(k, 1.5, 2.0) for k in range(1, 6)], (0.0, 1.0), 1e-6)
        assert rep.ok and rep.max_energy_increase == 0.0 and rep.max_mass_drift == 0.0

    def test_stationary_solution_from_solver(self):
        g = GridSpec(1, 10, 0.1)
        p = porous(g)
        res = run(np.full(10, 0.3), p, SolverConfig(tau=1.0, tolerance=1e-9), TimeLoopSpec(0.01, 0.03))
        rep = check_structure(res.initial, res.steps, p.box, 1e-9)
        assert rep.ok
        assert all(abs(d.energy - res.initial.energy) <= 1e-12 for d in res.steps)

    def test_mass_jump_flagged(self):
        steps = [diag(1, 1.0, 2.0), diag(2, 0.9, 2.0 + 1e-6), diag(3, 0.8, 2.0)]
        rep = check_structure(diag(0, 1.1, 2.0), steps, (0.0, 1.0), 1e-6)
        assert not rep.ok
        assert [v[:2] for v in rep.violations] == [(2, "mass")]

    def test_energy_rise_and_bounds_flagged(self):
        steps = [diag(1, 1.2, 2.0), diag(2, 1.0, 2.0, lo=-1e-9), diag(3, 0.9, 2.0, hi=1.1)]
        rep = check_structure(diag(0, 1.0, 2.0), steps, (0.0, 1.0), 1e-6)
        kinds = {v[1] for v in rep.violations}
        assert kinds == {"energy", "lower bound", "upper bound"}

    def test_missing_energy_skipped(self):
        steps = [diag(1, None, 2.0), diag(2, None, 2.0)]
        assert check_structure(diag(0, None, 2.0), steps, (0.0, 1.0), 1e-6).ok


def test_diagnose_mass_uses_cell_volume():
    g = GridSpec(2, 4, 0.5)
    p = GradientFlowProblem(g, MOBILITIES["linear"](), PorousMediumEnergy(g), (0.0, 10.0))
    d = diagnose(np.ones(g.shape), p)
    assert d.mass == pytest.approx(4.0)
    assert d.energy == pytest.approx(4.0)
