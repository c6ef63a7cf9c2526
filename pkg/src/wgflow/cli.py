"""Command line entry point: ``wgflow run | presets | study``.

Exit codes: 0 on success, 2 for configuration errors, 3 when ``--strict``
is given and a time step fails to converge.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .grid import set_workers
from .io import (
    ConfigError,
    DiagnosticsWriter,
    dump_config,
    parse_config,
    study_grid_independence,
    write_snapshot,
    write_study,
)
from .jko import StepFailure, run
from .presets import PRESET_NAMES, PresetError, load_preset

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
DEFAULT_OUT = "wgflow_out"

log = logging.getLogger("wgflow")


def _parse_sets(items):
    out, errors = {}, []
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            errors.append(f"--set expects key=value, got {item!r}")
        else:
            out[key.strip()] = value.strip()
    return out, errors


def _out_dir(arg, cfg_dir):
    return Path(arg or os.environ.get("WGF_OUT") or cfg_dir or DEFAULT_OUT)


def cmd_run(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    sets, errors = _parse_sets(args.set)
    if args.cold_start:
        sets["solver.cold_start"] = "true"
    try:
        cfg = parse_config(text)
        if sets and not errors:
            cfg = cfg.with_overrides(sets)
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = _out_dir(args.out, cfg.out_dir)
    try:
        return _run_into(out, cfg, args.strict)
    except OSError as exc:
        print(f"error: cannot write output to {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _run_into(out: Path, cfg, strict: bool) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    preset = cfg.preset
    grid = preset.grid()
    ext = "csv" if cfg.snapshot_format == "csv" else "bin"

    with DiagnosticsWriter(out / "diagnostics.csv") as diag_out:
        def sink(diag, rho, snapshot):
            diag_out.write(diag)
            if snapshot:
                write_snapshot(out / f"rho_{diag.step:06d}.{ext}", rho, grid, cfg.snapshot_format)
            if diag.step:
                log.info("step %d t=%.6g iters=%d mass=%.15g", diag.step, diag.time,
                         diag.pdfb_iters, diag.mass)

        try:
            result = run(preset.initial(grid), preset.problem(), preset.solver_config(),
                         preset.time_loop(), sink=sink, strict=strict)
        except StepFailure as exc:
            print(f"solver error: {exc}", file=sys.stderr)
            return EXIT_SOLVER
    if not result.all_converged:
        log.warning("some steps stopped at the iteration limit; see %s", out / "diagnostics.csv")
    print(f"wrote {len(result.steps)} steps to {out}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in PRESET_NAMES:
        print(name)
    return EXIT_OK


def cmd_study(args) -> int:
    try:
        preset = load_preset(args.preset)
        sets, errors = _parse_sets(args.set)
        if errors:
            raise PresetError("; ".join(errors))
        if sets:
            preset = preset.with_overrides(sets)
        for h in args.h_list:
            preset.with_overrides({"grid.h": h}).grid()
    except (PresetError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = study_grid_independence(preset, args.h_list, t_end=args.t_end)
    out = _out_dir(args.out, None)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = write_study(out / f"grid_independence_{preset.name}.csv", rows)
    except OSError as exc:
        print(f"error: cannot write output to {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for h, first, mean in rows:
        print(f"h={h:g} first_step_iters={first} mean_iters={mean:.2f}")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wgflow", description="Minimizing-movement solver for Wasserstein-like gradient flows")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every time step")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a configured simulation")
    r.add_argument("--config", required=True, help="configuration file (key = value lines)")
    r.add_argument("--out", help="output directory (default: $WGF_OUT, then output.dir, then ./wgflow_out)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a parameter")
    r.add_argument("--threads", type=int, default=None, help="cap FFT worker threads (1 = deterministic)")
    r.add_argument("--strict", action="store_true", help="fail with exit code 3 on non-convergence")
    r.add_argument("--cold-start", action="store_true", help="start every step from zero iterates")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("presets", help="list preset names")
    p.set_defaults(func=cmd_presets)

    s = sub.add_parser("study", help="reproduction studies")
    s.add_argument("study", choices=["grid-independence"])
    s.add_argument("--preset", required=True)
    s.add_argument("--h-list", required=True, nargs="+", type=float)
    s.add_argument("--t-end", type=float, default=None, help="shorter horizon than the preset's")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", help="output directory")
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("config error: --threads must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        set_workers(threads)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
