"""Outer minimizing-movement loop and structure diagnostics.

Each time step solves one saddle problem with :func:`~wgflow.pdfb.solve_saddle`
and records mass, bounds, energy and the transport action so that energy
dissipation, mass conservation and bound preservation can be checked
afterwards by :func:`check_structure`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .pdfb import SolverConfig, WarmStart, check_stepsize, solve_saddle, stepsize_bound
from .physics import GradientFlowProblem

__all__ = [
    "TimeLoopSpec",
    "StepDiagnostics",
    "RunResult",
    "StepFailure",
    "StructureReport",
    "run",
    "diagnose",
    "check_structure",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeLoopSpec:
    dt: float
    t_end: float
    snapshot_every: int = 1
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")
        if self.n_steps > self.max_steps:
            raise ValueError(f"{self.n_steps} steps exceed the budget of {self.max_steps}")

    @property
    def n_steps(self) -> int:
        # tolerate t_end values that are multiples of dt up to round-off
        return int(math.ceil(self.t_end / self.dt - 1e-9))


@dataclass
class StepDiagnostics:
    step: int
    time: float
    energy: Optional[float]
    mass: float
    min_rho: float
    max_rho: float
    pdfb_iters: int = 0
    action: float = 0.0
    converged: bool = True
    final_change: float = 0.0
    monitor: Optional[float] = None

    def as_dict(self):
        return asdict(self)


class StepFailure(RuntimeError):
    """A time step could not be completed; ``step`` is its index (1-based)."""

    def __init__(self, step: int, cause):
        super().__init__(f"time step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class RunResult:
    rho: np.ndarray
    initial: StepDiagnostics
    steps: list = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return all(d.converged for d in self.steps)


def diagnose(rho, problem: GradientFlowProblem, step=0, time=0.0, **extra) -> StepDiagnostics:
    en = problem.energy
    energy = en.value(rho) if en.has_value else None
    monitor = en.monitor(rho) if hasattr(en, "monitor") else None
    return StepDiagnostics(
        step=step,
        time=time,
        energy=energy,
        mass=float(np.sum(rho)) * problem.grid.cell_volume,
        min_rho=float(np.min(rho)),
        max_rho=float(np.max(rho)),
        monitor=monitor,
        **extra,
    )


Sink = Callable[[StepDiagnostics, np.ndarray, bool], None]


def run(rho0, problem: GradientFlowProblem, cfg: SolverConfig, loop: TimeLoopSpec,
        sink: Optional[Sink] = None, strict: bool = False) -> RunResult:
    """Advance ``rho0`` by ``loop.n_steps`` minimizing-movement steps.

    ``sink(diag, rho, is_snapshot)`` is called after every step; snapshots
    fall on multiples of ``loop.snapshot_every`` and on the last step.
    Steps whose inner iteration stops at ``iter_max`` are kept and flagged
    (``converged=False``) unless ``strict`` is set, in which case a
    :class:`StepFailure` is raised.
    """
    rho = problem.check_initial(rho0).copy()
    if cfg.check_stepsize:
        check_stepsize(cfg, stepsize_bound(problem.box, rho, problem.mobility))
    result = RunResult(rho, diagnose(rho, problem))
    if sink is not None:
        sink(result.initial, rho, True)
    warm = WarmStart()
    n = loop.n_steps
    for k in range(1, n + 1):
        try:
            sol = solve_saddle(rho, problem, cfg, loop.dt, warm)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise StepFailure(k, exc) from exc
        if not sol.converged:
            msg = f"step {k}: no convergence in {sol.iterations} iterations (change {sol.final_change:.3e})"
            if strict:
                raise StepFailure(k, msg)
            log.warning(msg)
        rho, warm = sol.rho, sol.warm
        diag = diagnose(rho, problem, step=k, time=k * loop.dt, pdfb_iters=sol.iterations,
                        action=sol.action, converged=sol.converged,
                        final_change=sol.final_change)
        result.steps.append(diag)
        if sink is not None:
            sink(diag, rho, k % loop.snapshot_every == 0 or k == n)
    result.rho = rho
    return result


@dataclass
class StructureReport:
    violations: list = field(default_factory=list)
    max_mass_drift: float = 0.0
    max_energy_increase: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def check_structure(initial: StepDiagnostics, steps, box, tolerance: float,
                    dt: Optional[float] = None, mass_tol: float = 1e-10,
                    bound_tol: float = 1e-12) -> StructureReport:
    """Check energy dissipation, mass conservation and the box bounds.

    Energy may rise by at most ``10*tolerance*(1 + |E_prev|)`` per step.
    When ``dt`` is given, the stronger ``E_new + action/dt <= E_prev`` (with
    the same slack) is checked as well.  Series without energy values skip
    the energy tests.
    """
    rep = StructureReport()
    lo, hi = box
    prev = initial
    m0 = initial.mass
    scale = abs(m0) if m0 != 0 else 1.0
    for d in steps:
        drift = abs(d.mass - m0) / scale
        rep.max_mass_drift = max(rep.max_mass_drift, drift)
        if drift > mass_tol:
            rep.violations.append((d.step, "mass", drift))
        if d.min_rho < lo - bound_tol:
            rep.violations.append((d.step, "lower bound", d.min_rho))
        if d.max_rho > hi + bound_tol:
            rep.violations.append((d.step, "upper bound", d.max_rho))
        if d.energy is not None and prev.energy is not None:
            slack = 10.0 * tolerance * (1.0 + abs(prev.energy))
            rise = d.energy - prev.energy
            rep.max_energy_increase = max(rep.max_energy_increase, rise)
            if rise > slack:
                rep.violations.append((d.step, "energy", rise))
            if dt is not None and math.isfinite(d.action):
                if d.energy + d.action / dt > prev.energy + slack:
                    rep.violations.append((d.step, "energy+action", d.energy + d.action / dt - prev.energy))
        prev = d
    return rep
