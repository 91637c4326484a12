"""Command-line entry point: ``loopmag {synthesize,simulate,identify,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 synthesis error,
3 numerical divergence or every sweep cell failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import (
    build_params,
    build_plant,
    build_waveform,
    config_digest,
    load_config,
    n_atoms,
    parse_config,
)
from .errors import ConfigError, LoopmagError, NumericalDivergence
from .physim import FieldWaveform
from .loopshape import butterworth1, synthesize_controller
from .looprun import Scenario, estimation_error, run_closed_loop, run_open_loop
from .sysid import SweepPlan, default_jobs, fit_rational, robustness_sweep, sweep_table_csv, swept_sine
from .tfcore import bode, tf_evaluate

EXIT_OK, EXIT_CONFIG, EXIT_SYNTHESIS, EXIT_DIVERGENCE = 0, 1, 2, 3
BODE_GRID = np.geomspace(1.0, 1e8, 400)

log = logging.getLogger("loopmag")


class _Run:
    """Resolved configuration plus output helpers shared by the commands."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.digest = config_digest(cfg)
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def comment(self) -> str:
        return f"config_sha256: {self.digest}"

    @property
    def want_json(self) -> bool:
        return "json" in self.cfg["output"]["formats"]

    def write_json(self, name: str, data: dict) -> None:
        data = dict(data, config_sha256=self.digest)
        (self.out / name).write_text(json.dumps(data, sort_keys=True, indent=2, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serialisable: {type(x)}")


def _finite(x):
    return x if x is None or math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=_jsonable), flush=True)


def _design(run: _Run):
    params = build_params(run.cfg)
    plant = build_plant(run.cfg, params)
    ctrl = run.cfg["controller"]
    return synthesize_controller(plant, butterworth1(ctrl["fc_hz"]), ctrl["convention"])


def _scenario(run: _Run, controller) -> Scenario:
    r = run.cfg["run"]
    try:
        return Scenario(
            params=build_params(run.cfg),
            waveform=build_waveform(run.cfg),
            controller=controller,
            reference=r["reference_v"],
            duration=r["duration_ms"] * 1e-3,
            sample_rate=r["sample_rate_hz"],
            feedback_on_at=r["feedback_on_at_ms"] * 1e-3,
            seed=r["seed"],
            replicates=r["replicates"],
            n_atoms=n_atoms(run.cfg),
            refit=r["refit_numerator"],
            u_limit=r["u_limit_v"],
        )
    except ValueError as exc:
        raise ConfigError(f"run: {exc}") from exc


def tracking_band_hz(t, level: float = 1 / math.sqrt(2)) -> float:
    """Highest frequency below which ``|1 - T|`` stays under ``level``."""
    grid = np.geomspace(1.0, 1e8, 4000)
    err = np.array([abs(1 - tf_evaluate(t, w)) for w in grid])
    above = np.flatnonzero(err > level)
    top = grid[above[0] - 1] if above.size else grid[-1]
    return float(top / (2 * math.pi))


# commands -------------------------------------------------------------------------


def cmd_synthesize(run: _Run, args) -> int:
    design = _design(run)
    if not design.closed_loop_stable:
        print(f"warning: closed loop is unstable under the {design.sign_convention.value} convention",
              file=sys.stderr)
    run.write_json("design.json", design.to_dict())
    for name, tf in (("P", design.plant), ("C", design.c), ("T", design.t)):
        bode(tf, BODE_GRID).to_csv(run.out / f"bode_{name}.csv", run.comment)
    m = design.margins
    _emit({
        "command": "synthesize",
        "convention": design.sign_convention.value,
        "closed_loop_stable": design.closed_loop_stable,
        "t_dc": design.t.dc_value(),
        "tracking_band_hz": tracking_band_hz(design.t),
        "crossover_hz": None if m is None else m.crossover_rad_s / (2 * math.pi),
        "phase_margin_deg": None if m is None else m.phase_margin_deg,
        "gain_margin_db": None if m is None else _finite(m.gain_margin_db),
        "config_sha256": run.digest,
    })
    return EXIT_OK


def _settle_time(rec, start: float, tol_frac: float = 0.02, smooth_s: float = 1e-5):
    """Time after ``start`` from which the 10 us running mean of ``b_est``
    stays within ``tol_frac`` of the peak field."""
    if len(rec.t) < 2:
        return None
    width = max(1, int(round(smooth_s / (rec.t[1] - rec.t[0]))))
    kernel = np.ones(width) / width
    est = np.convolve(rec.b_est, kernel, mode="same")
    truth = np.convolve(rec.b_true, kernel, mode="same")
    scale = max(float(np.max(np.abs(rec.b_true))), 1e-300)
    bad = np.flatnonzero((np.abs(est - truth) > tol_frac * scale) & (rec.t >= start))
    bad = bad[bad < len(rec.t) - width]
    if bad.size == 0:
        return 0.0
    return float(rec.t[bad[-1] + 1] - start)


def cmd_simulate(run: _Run, args) -> int:
    r = run.cfg["run"]
    controller = _design(run) if r["mode"] == "closed" else None
    sc = _scenario(run, controller)
    window = tuple(x * 1e-3 for x in r["error_window_ms"])
    records, status = [], EXIT_OK
    for i in range(sc.replicates):
        name = "record.csv" if sc.replicates == 1 else f"record_{i:03d}.csv"
        try:
            if r["mode"] == "closed":
                rec = run_closed_loop(sc, seed=sc.seed + i)
            else:
                assumed = r["assumed_n"] or sc.params.n_nominal
                rec = run_open_loop(sc, assumed, r["open_window_us"] * 1e-6, seed=sc.seed + i).record
        except NumericalDivergence as exc:
            if exc.record is not None:
                _write_record(run, exc.record, name)
            print(f"error: {exc}", file=sys.stderr)
            _emit({"command": "simulate", "error": "NumericalDivergence", "message": str(exc),
                   "replicate": i, "config_sha256": run.digest})
            return EXIT_DIVERGENCE
        _write_record(run, rec, name)
        records.append(rec)
    stats = estimation_error(records, window=window)
    summary = {
        "command": "simulate",
        "mode": r["mode"],
        "seed": sc.seed,
        "replicates": sc.replicates,
        "rms_error_g": stats.rms_g,
        "rms_error_std_g": stats.std,
        "mean_square_error_g2": float(np.mean(stats.per_record_ms)),
        "error_window_s": list(window),
        "final_b_est_g": float(records[0].b_est[-1]),
        "settle_time_s": _settle_time(records[0], sc.feedback_on_at if controller else 0.0),
        "config_sha256": run.digest,
    }
    _emit(summary)
    return status


def _write_record(run: _Run, rec, name: str) -> None:
    rec.metadata["config_sha256"] = run.digest
    if run.want_json:
        rec.write(run.out / name, run.comment)
    else:
        rec.to_csv(run.out / name, run.comment)


def cmd_identify(run: _Run, args) -> int:
    ident = run.cfg["identify"]
    # the plant is identified with no applied field; the waveform section is ignored
    sc = _scenario(run, None).with_(waveform=FieldWaveform())
    plan = SweepPlan(
        frequencies=tuple(np.geomspace(ident["f_min_hz"], ident["f_max_hz"], ident["n_points"])),
        drive_amplitude=ident["drive_amplitude_v"],
        settle_cycles=ident["settle_cycles"],
        measure_cycles=ident["measure_cycles"],
        reset_between_points=ident["reset_between_points"],
        level_corner_hz=ident["level_corner_hz"],
    )
    print(f"identify: {len(plan.frequencies)} points", file=sys.stderr)
    result = swept_sine(sc, plan)
    result.response.to_csv(run.out / "identify_response.csv", run.comment)
    fit = fit_rational(result.response, ident["n_zeros"], ident["n_poles"], full_output=True)
    bode(fit.tf, result.response.omega).to_csv(run.out / "identify_fit.csv", run.comment)
    truth = build_plant(run.cfg, build_params(run.cfg))
    report = {
        "fit": fit.tf.to_dict(),
        "fit_residual": fit.residual,
        "fit_iterations": fit.iterations,
        "reference_plant": truth.to_dict(),
        "coherence": result.coherence.tolist(),
        "frequencies_hz": (result.response.omega / (2 * math.pi)).tolist(),
        "max_fz_over_f": result.max_excursion,
        "seed": sc.seed,
    }
    if run.want_json:
        run.write_json("identify.json", report)
    _emit({"command": "identify", "fit": fit.tf.to_dict(), "fit_residual": fit.residual,
           "min_coherence": float(result.coherence.min()), "config_sha256": run.digest})
    return EXIT_OK


def cmd_sweep(run: _Run, args) -> int:
    sw = run.cfg["sweep"]
    r = run.cfg["run"]
    sc = _scenario(run, _design(run))

    def progress(n, rep, res):
        state = "failed: " + res["error"] if res["error"] else f"closed_rms={res['closed']:.4g} G"
        print(f"cell n={n:g} replicate={rep}: {state}", file=sys.stderr, flush=True)

    rows = robustness_sweep(
        sc, sw["atom_numbers"], sw["replicates"], jobs=args.jobs,
        error_window=tuple(x * 1e-3 for x in r["error_window_ms"]),
        open_window=r["open_window_us"] * 1e-6, n_log_sigma=sw["n_log_sigma"], progress=progress,
    )
    sweep_table_csv(rows, run.out / "robustness.csv", run.comment)
    print(f"{'n_atoms':>10} {'closed_rms_G':>14} {'open_rms_G':>14}", file=sys.stderr)
    for row in rows:
        print(f"{row.n:>10.3g} {row.closed_rms_mean:>14.5g} {row.open_rms_mean:>14.5g}", file=sys.stderr)
    total = len(rows) * sw["replicates"]
    failed = sum(row.failed_cells for row in rows)
    _emit({"command": "sweep", "rows": len(rows), "failed_cells": failed, "seed": sc.seed,
           "config_sha256": run.digest})
    return EXIT_DIVERGENCE if failed == total else EXIT_OK


COMMANDS = {
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopmag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON scenario file (defaults if omitted)")
        p.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="base seed (overrides run.seed)")
        p.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg["run"]["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out = args.out if args.out is not None else Path(cfg["output"]["directory"])
        run = _Run(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LoopmagError as exc:
        _emit({"command": args.command, "error": type(exc).__name__, "message": str(exc),
               "config_sha256": run.digest})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS if _is_synthesis_error(exc) else EXIT_DIVERGENCE


def _is_synthesis_error(exc) -> bool:
    from . import errors

    return isinstance(exc, (errors.UnstablePlant, errors.ZeroOnImaginaryAxis, errors.ImproperQ,
                            errors.UnstableClosedLoop, errors.DegreeOverflow, errors.NoCrossover))


if __name__ == "__main__":
    sys.exit(main())
