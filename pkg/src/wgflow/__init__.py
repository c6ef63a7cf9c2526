"""Minimizing-movement (JKO) solver for Wasserstein-like gradient flows.

The spatially discrete step is a saddle problem on a staggered grid,
solved by a primal-dual forward-backward iteration (:mod:`wgflow.pdfb`).
"""

from .grid import GridSpec
from .jko import RunResult, StepDiagnostics, TimeLoopSpec, check_structure, run
from .pdfb import SolverConfig, solve_saddle, stepsize_bound
from .physics import GradientFlowProblem
from .presets import PRESET_NAMES, Preset, load_preset

__all__ = [
    "GridSpec",
    "GradientFlowProblem",
    "SolverConfig",
    "solve_saddle",
    "stepsize_bound",
    "TimeLoopSpec",
    "StepDiagnostics",
    "RunResult",
    "run",
    "check_structure",
    "Preset",
    "PRESET_NAMES",
    "load_preset",
]

__version__ = "0.1.0"
