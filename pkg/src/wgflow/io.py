"""Run configuration files, snapshot and diagnostics serialization, studies.

A configuration file is a list of flat ``key = value`` lines with dotted
keys; ``#`` starts a comment.  ``preset`` names the benchmark and every
other key either overrides one of its parameters or sets an output option
(``output.dir``, ``output.format``).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .grid import GridSpec
from .jko import StepDiagnostics, TimeLoopSpec, run
from .presets import PARAM_TYPES, Preset, PresetError, load_preset

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "dump_config",
    "write_snapshot",
    "read_binary",
    "read_csv_snapshot",
    "DIAGNOSTIC_FIELDS",
    "DiagnosticsWriter",
    "write_diagnostics",
    "study_grid_independence",
    "write_study",
]

MAGIC = b"WGF1"
FORMATS = ("csv", "binary")
OUTPUT_KEYS = {"output.dir": str, "output.format": str}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    preset: Preset
    overrides: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    snapshot_format: str = "csv"

    @property
    def seed(self) -> Optional[int]:
        return self.preset.params.get("seed")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        try:
            preset = self.preset.with_overrides(overrides)
        except PresetError as exc:
            raise ConfigError(str(exc).split("; ")) from None
        return RunConfig(preset, {**self.overrides, **overrides}, self.out_dir, self.snapshot_format)


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_config(text: str) -> RunConfig:
    """Parse a configuration; all errors are collected into one :class:`ConfigError`."""
    errors = []
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        if key in entries:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        entries[key] = (lineno, value)

    name = entries.pop("preset", (0, None))[1]
    preset = None
    if not name:
        errors.append("missing preset")
    else:
        try:
            preset = load_preset(name)
        except PresetError as exc:
            errors.append(str(exc))

    out_dir, fmt = None, "csv"
    if "output.dir" in entries:
        out_dir = entries.pop("output.dir")[1] or None
    if "output.format" in entries:
        lineno, fmt = entries.pop("output.format")
        if fmt not in FORMATS:
            errors.append(f"line {lineno}: output.format must be one of {FORMATS}, got {fmt!r}")

    overrides = {}
    for key, (lineno, value) in entries.items():
        if key not in PARAM_TYPES:
            errors.append(f"line {lineno}: unknown key {key!r}")
        elif preset is not None and key not in preset.params:
            errors.append(f"line {lineno}: key {key!r} does not apply to preset {preset.name!r}")
        else:
            overrides[key] = value
    if preset is not None and overrides:
        try:
            preset = preset.with_overrides(overrides)
        except PresetError as exc:
            errors.extend(str(exc).split("; "))
    if errors:
        raise ConfigError(errors)
    return RunConfig(preset, overrides, out_dir, fmt)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Complete configuration text; ``parse_config`` reads it back unchanged."""
    lines = [f"preset = {cfg.preset.name}"]
    for key in sorted(cfg.preset.params):
        lines.append(f"{key} = {_format_value(cfg.preset.params[key])}")
    if cfg.out_dir:
        lines.append(f"output.dir = {cfg.out_dir}")
    lines.append(f"output.format = {cfg.snapshot_format}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# snapshots


def _io_error(path, exc):
    return OSError(f"{path}: {exc.strerror or exc}")


def write_snapshot(path, rho, grid: GridSpec, fmt: str = "csv") -> Path:
    """Write one density field.

    CSV: header ``x,rho`` or ``x,y,rho``, one row per cell, x varying
    fastest, 17 significant digits.  Binary: ``b"WGF1"``, then ``dim``,
    ``nx``, ``ny`` (0 in 1D) as little-endian uint32, then the values as
    little-endian float64 in the same order.
    """
    path = Path(path)
    rho = grid.check_density(rho)
    try:
        if fmt == "csv":
            coords = [c.ravel() for c in grid.cell_centers()]
            cols = np.column_stack([*coords, rho.ravel()])
            header = ",".join(["x", "y"][: grid.dim] + ["rho"])
            np.savetxt(path, cols, fmt="%.17g", delimiter=",", header=header, comments="")
        elif fmt == "binary":
            ny = grid.n if grid.dim == 2 else 0
            with open(path, "wb") as fh:
                fh.write(MAGIC + struct.pack("<3I", grid.dim, grid.n, ny))
                fh.write(np.ascontiguousarray(rho, dtype="<f8").tobytes())
        else:
            raise ValueError(f"unknown snapshot format {fmt!r}")
    except OSError as exc:
        raise _io_error(path, exc) from exc
    return path


def read_binary(path) -> np.ndarray:
    """Read a field written by :func:`write_snapshot` with ``fmt="binary"``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise _io_error(path, exc) from exc
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError(f"{path}: not a WGF1 snapshot")
    dim, nx, ny = struct.unpack("<3I", data[4:16])
    shape = (nx,) if dim == 1 else (ny, nx)
    values = np.frombuffer(data, dtype="<f8", offset=16)
    if values.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} values, found {values.size}")
    return values.reshape(shape).astype(float)


def read_csv_snapshot(path, grid: GridSpec) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, -1].reshape(grid.shape)


# --------------------------------------------------------------------------
# diagnostics


DIAGNOSTIC_FIELDS = ("step", "time", "energy", "mass", "min_rho", "max_rho",
                     "pdfb_iters", "action", "converged")


def _diag_row(d: StepDiagnostics) -> list[str]:
    def num(v):
        return "nan" if v is None else f"{v:.17g}"

    return [str(d.step), num(d.time), num(d.energy), num(d.mass), num(d.min_rho),
            num(d.max_rho), str(d.pdfb_iters), num(d.action), "1" if d.converged else "0"]


class DiagnosticsWriter:
    """Append diagnostics rows to a CSV file as the run proceeds."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "w", newline="")
        except OSError as exc:
            raise _io_error(self.path, exc) from exc
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(DIAGNOSTIC_FIELDS)

    def write(self, d: StepDiagnostics):
        self._w.writerow(_diag_row(d))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_diagnostics(path, rows: Iterable[StepDiagnostics]) -> Path:
    with DiagnosticsWriter(path) as w:
        for d in rows:
            w.write(d)
    return Path(path)


# --------------------------------------------------------------------------
# studies


def study_grid_independence(preset: Preset, h_list: Sequence[float], t_end: Optional[float] = None):
    """Rows ``(h, first_step_iters, mean_iters)``, one per spacing in ``h_list``."""
    if not len(h_list):
        raise ValueError("h_list is empty")
    rows = []
    for h in h_list:
        p = preset.with_overrides({"grid.h": float(h)})
        loop = p.time_loop()
        if t_end is not None:
            loop = TimeLoopSpec(loop.dt, t_end, loop.snapshot_every)
        res = run(p.initial(), p.problem(), p.solver_config(), loop)
        iters = [d.pdfb_iters for d in res.steps]
        first = iters[0] if iters else 0
        mean = float(np.mean(iters)) if iters else 0.0
        rows.append((float(h), first, mean))
    return rows


def write_study(path, rows) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("h", "first_step_iters", "mean_iters"))
            for h, first, mean in rows:
                w.writerow((repr(h), first, repr(mean)))
    except OSError as exc:
        raise _io_error(path, exc) from exc
    return path
