"""Ready-to-run benchmark problems.

Every preset is a flat parameter dictionary (the same keys as the run
configuration files) plus a model name; :class:`Preset` turns it into a
problem, an initial density, solver settings and a time loop.  Overrides go
through :meth:`Preset.with_overrides`, which type-checks against the preset's
own keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Optional

import numpy as np

from .grid import GridSpec
from .jko import TimeLoopSpec
from .pdfb import SolverConfig
from .physics import (
    MOBILITIES,
    AnisotropicCahnHilliardEnergy,
    CahnHilliardEnergy,
    DoublyDegenerateModel,
    GradientFlowProblem,
    PorousMediumEnergy,
    SaturatedFokkerPlanckEnergy,
    ThinFilmEnergy,
)

__all__ = [
    "BARENBLATT_T0",
    "barenblatt",
    "Preset",
    "PRESET_NAMES",
    "load_preset",
    "PresetError",
    "PARAM_TYPES",
]

BARENBLATT_T0 = 1e-3


def barenblatt(x, t, t0: float = BARENBLATT_T0):
    """Barenblatt profile of ``rho_t = (rho (rho^2)')'`` shifted by ``t0``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    s = t + t0
    x = np.asarray(x, dtype=float)
    return s ** (-1.0 / 3.0) * np.maximum((3.0 / 16.0) ** (1.0 / 3.0) - s ** (-2.0 / 3.0) * x * x / 12.0, 0.0)


class PresetError(ValueError):
    """Unknown preset or invalid parameter override."""


# key -> python type; every preset carries a subset of these
PARAM_TYPES = MappingProxyType({
    "grid.h": float,
    "domain.lower": float,
    "domain.upper": float,
    "box.lower": float,
    "box.upper": float,
    "mobility.mode": str,
    "time.dt": float,
    "time.t_end": float,
    "time.snapshot_every": int,
    "solver.tau": float,
    "solver.sigma": float,
    "solver.tolerance": float,
    "solver.iter_max": int,
    "solver.check_stepsize": bool,
    "solver.cold_start": bool,
    "solver.convex_split": bool,
    "model.epsilon": float,
    "model.alpha": float,
    "model.beta": float,
    "model.omega": float,
    "model.init_amplitude": float,
    "model.init_margin": float,
    "seed": int,
})

_POSITIVE = {"grid.h", "time.dt", "solver.tau", "solver.sigma", "solver.tolerance",
             "time.snapshot_every", "solver.iter_max", "model.epsilon", "model.beta"}
_CHOICES = {"mobility.mode": ("implicit", "semi-implicit")}


def _validate(key, value) -> list[str]:
    errs = []
    if key in _POSITIVE and not value > 0:
        errs.append(f"{key} must be positive, got {value!r}")
    if key in _CHOICES and value not in _CHOICES[key]:
        errs.append(f"{key} must be one of {_CHOICES[key]}, got {value!r}")
    if key == "time.t_end" and value < 0:
        errs.append("time.t_end must be non-negative")
    return errs


# --------------------------------------------------------------------------
# model builders: params -> (dim, mobility name, energy factory, rho_bc, init)


def _common(h, lo, hi, blo, bhi, dt, t_end, tau, tol, mode="implicit", snap=10, sigma=None):
    return {
        "grid.h": h, "domain.lower": lo, "domain.upper": hi,
        "box.lower": blo, "box.upper": bhi, "mobility.mode": mode,
        "time.dt": dt, "time.t_end": t_end, "time.snapshot_every": snap,
        "solver.tau": tau, "solver.sigma": 1.0 / tau if sigma is None else sigma,
        "solver.tolerance": tol, "solver.iter_max": 20000,
        "solver.check_stepsize": True, "solver.cold_start": False, "solver.convex_split": True,
    }


def _tanh_disk(x, y, cx, cy, r, eps0):
    return -np.tanh((np.hypot(x - cx, y - cy) - r) / eps0)


@dataclass(frozen=True)
class _Model:
    dim: int
    mobility: str
    energy: Callable[[GridSpec, dict], object]
    init: Callable[[tuple, dict], np.ndarray]
    rho_bc: str = "neumann"
    reference: Optional[Callable] = None


def _fp_potential(g: GridSpec):
    (x,) = g.cell_centers()
    return 0.5 * x * x


_MODELS = {
    "porous_media": _Model(
        1, "linear", lambda g, p: PorousMediumEnergy(g),
        lambda c, p: barenblatt(c[0], 0.0),
        reference=lambda c, t: barenblatt(c[0], t),
    ),
    "fokker_planck_saturated": _Model(
        1, "saturated", lambda g, p: SaturatedFokkerPlanckEnergy(g, _fp_potential(g)),
        lambda c, p: np.full(c[0].shape, 0.415),
    ),
    "thin_film": _Model(
        1, "cubic", lambda g, p: ThinFilmEnergy(g),
        lambda c, p: 0.8 - np.cos(np.pi * c[0]) + 0.25 * np.cos(2 * np.pi * c[0]),
    ),
    "thin_film_vdw1": _Model(
        1, "cubic", lambda g, p: ThinFilmEnergy(g, "vdw1", p["model.epsilon"]),
        lambda c, p: (1 - p["model.epsilon"]) * np.pi / 2 * np.cos(np.pi * c[0] / 2) + p["model.epsilon"],
    ),
    "thin_film_vdw2": _Model(
        1, "cubic", lambda g, p: ThinFilmEnergy(g, "vdw2", p["model.epsilon"]),
        lambda c, p: (1 - p["model.epsilon"]) * np.pi / 2 * np.cos(np.pi * c[0] / 2) + p["model.epsilon"],
    ),
    "cahn_hilliard": _Model(
        2, "one_minus_square", lambda g, p: CahnHilliardEnergy(g, p["model.epsilon"]),
        lambda c, p: np.random.default_rng(p["seed"]).uniform(
            -p["model.init_amplitude"], p["model.init_amplitude"], c[0].shape),
    ),
    "doubly_degenerate": _Model(
        2, "one_minus_square_squared", lambda g, p: DoublyDegenerateModel(g, p["model.epsilon"]),
        lambda c, p: np.clip(np.maximum(_tanh_disk(*c, -0.15, 0.0, 0.15, 0.025),
                                        _tanh_disk(*c, 0.2, 0.0, 0.08, 0.025)),
                             -1.0 + p["model.init_margin"], 1.0 - p["model.init_margin"]),
    ),
}
for _kind in ("fourfold", "eightfold", "omega"):
    _MODELS[f"cahn_hilliard_aniso_{_kind}"] = _Model(
        2, "one_minus_square",
        (lambda k: lambda g, p: AnisotropicCahnHilliardEnergy(
            g, p["model.epsilon"], p["model.beta"], k, p["model.alpha"], p.get("model.omega", 4.0)))(_kind),
        lambda c, p: -np.tanh((np.hypot(c[0], c[1]) - 0.3) / 0.025),
        rho_bc="periodic",
    )


def _defaults() -> dict[str, tuple[str, dict]]:
    out = {}
    out["porous_media"] = ("porous_media", _common(0.01, -1.0, 1.0, 0.0, 1e6, 5e-4, 0.05, 1.0, 1e-5))
    fp = _common(0.02, -4.0, 4.0, 0.0, 1.0, 0.1, 5.0, 0.2, 1e-7, snap=5)
    out["fokker_planck_saturated"] = ("fokker_planck_saturated", fp)
    out["fokker_planck_saturated_semi"] = (
        "fokker_planck_saturated", {**fp, "time.dt": 0.01, "time.t_end": 1.0, "mobility.mode": "semi-implicit"})
    tf = _common(0.01, -1.0, 1.0, 0.0, 1e6, 1e-3, 0.1, 0.03, 1e-7)
    out["thin_film"] = ("thin_film", tf)
    out["thin_film_semi"] = ("thin_film", {**tf, "mobility.mode": "semi-implicit"})
    for k in ("vdw1", "vdw2"):
        out[f"thin_film_{k}"] = (f"thin_film_{k}", {
            **_common(0.005, 0.0, 1.0, 0.0, 1e6, 1e-3, 0.1, 0.01, 1e-7), "model.epsilon": 0.1})
    out["cahn_hilliard"] = ("cahn_hilliard", {
        **_common(1 / 64, 0.0, 1.0, -1.0, 1.0, 1e-3, 0.05, 20.0, 1e-7),
        "model.epsilon": 0.02, "model.init_amplitude": 0.05, "seed": 20240611})
    for k, alpha in (("fourfold", 0.2), ("eightfold", 0.2), ("omega", 0.4)):
        p = {**_common(1 / 128, -0.5, 0.5, -1.0, 1.0, 1e-3, 0.05, 2.0, 1e-5, snap=5),
             "model.epsilon": 0.01, "model.beta": 1e-4, "model.alpha": alpha}
        if k == "omega":
            p["model.omega"] = 4.0
        out[f"cahn_hilliard_aniso_{k}"] = (f"cahn_hilliard_aniso_{k}", p)
        out[f"cahn_hilliard_aniso_{k}_reduced"] = (f"cahn_hilliard_aniso_{k}", {**p, "grid.h": 1 / 64})
    out["doubly_degenerate"] = ("doubly_degenerate", {
        **_common(1 / 64, -0.5, 0.5, -1.0, 1.0, 0.1, 2.0, 0.2, 1e-5, snap=2), "model.epsilon": 0.02,
        "model.init_margin": 0.0})
    return out


_DEFAULTS = _defaults()
PRESET_NAMES = tuple(_DEFAULTS)


@dataclass(frozen=True)
class Preset:
    """A named benchmark: model plus a complete flat parameter set."""

    name: str
    model: str
    params: dict = field(default_factory=dict)

    # -- construction -----------------------------------------------------

    def with_overrides(self, overrides: dict) -> "Preset":
        """Return a copy with ``overrides`` applied; all problems are reported at once."""
        errs = []
        new = dict(self.params)
        for key, value in overrides.items():
            if key not in self.params:
                errs.append(f"unknown key {key!r} for preset {self.name!r}")
                continue
            want = PARAM_TYPES[key]
            try:
                value = _coerce(value, want)
            except (TypeError, ValueError):
                errs.append(f"{key}: expected {want.__name__}, got {value!r}")
                continue
            errs.extend(_validate(key, value))
            new[key] = value
        if errs:
            raise PresetError("; ".join(errs))
        return Preset(self.name, self.model, new)

    @property
    def _spec(self) -> _Model:
        return _MODELS[self.model]

    # -- builders ---------------------------------------------------------

    def grid(self) -> GridSpec:
        p = self.params
        return GridSpec.from_box(p["domain.lower"], p["domain.upper"], p["grid.h"], self._spec.dim)

    def problem(self) -> GradientFlowProblem:
        spec, p = self._spec, self.params
        g = self.grid()
        mob = MOBILITIES[spec.mobility]().with_mode(p["mobility.mode"])
        return GradientFlowProblem(g, mob, spec.energy(g, p), (p["box.lower"], p["box.upper"]), spec.rho_bc)

    def initial(self, grid: Optional[GridSpec] = None) -> np.ndarray:
        g = grid or self.grid()
        return np.asarray(self._spec.init(g.cell_centers(), self.params), dtype=float)

    def reference(self, t: float, grid: Optional[GridSpec] = None):
        """Exact solution at time ``t`` when the benchmark has one, else ``None``."""
        ref = self._spec.reference
        if ref is None:
            return None
        return ref((grid or self.grid()).cell_centers(), t)

    def solver_config(self) -> SolverConfig:
        p = self.params
        return SolverConfig(
            tau=p["solver.tau"], sigma=p["solver.sigma"], tolerance=p["solver.tolerance"],
            iter_max=p["solver.iter_max"], check_stepsize=p["solver.check_stepsize"],
            cold_start=p["solver.cold_start"], convex_split=p["solver.convex_split"],
        )

    def time_loop(self) -> TimeLoopSpec:
        p = self.params
        return TimeLoopSpec(p["time.dt"], p["time.t_end"], p["time.snapshot_every"])


def _coerce(value, want):
    if want is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ValueError(value)
    if want is int:
        if isinstance(value, bool):
            raise TypeError(value)
        if isinstance(value, str):
            return int(value.strip())
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return int(value)
    if want is float:
        if isinstance(value, bool):
            raise TypeError(value)
        out = float(value)
        if not np.isfinite(out):
            raise ValueError(value)
        return out
    if not isinstance(value, str):
        raise TypeError(value)
    return value


def load_preset(name: str) -> Preset:
    try:
        model, params = _DEFAULTS[name]
    except KeyError:
        raise PresetError(f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}") from None
    return Preset(name, model, dict(params))
