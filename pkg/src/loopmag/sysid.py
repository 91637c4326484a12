"""Swept-sine identification, rational fitting, and the atom-number sweep."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDrive, IllConditioned, LoopmagError, NonlinearRegime
from .looprun import Scenario, estimation_error, run_closed_loop, run_open_loop, simulate
from .physim import make_rng
from .tfcore import FrequencyResponse, RationalTF

log = logging.getLogger(__name__)

LINEAR_LIMIT = 0.05
MAX_CONDITION = 1e12
SWEEP_HEADER = (
    "n_atoms",
    "closed_rms_mean_G",
    "closed_rms_std_G",
    "open_rms_mean_G",
    "open_rms_std_G",
    "failed_cells",
)


def default_frequencies(lo: float = 100.0, hi: float = 3e5, n: int = 40) -> tuple:
    return tuple(float(f) for f in np.geomspace(lo, hi, n))


@dataclass(frozen=True)
class SweepPlan:
    """Stepped-sine schedule.

    The drive at ``f`` is ``drive_amplitude * max(1, f / level_corner_hz)``,
    which keeps the spin excursion roughly flat above the slow plant pole.
    Settle and measure spans are at least ``min_settle`` and ``min_measure``
    seconds regardless of the cycle counts.
    """

    frequencies: tuple = field(default_factory=default_frequencies)
    drive_amplitude: float = 1e-3
    settle_cycles: int = 10
    measure_cycles: int = 20
    reset_between_points: bool = True
    level_corner_hz: float = 1.6e3
    min_settle: float = 1e-3
    min_measure: float = 1e-3

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        if f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be positive and strictly increasing")
        if self.measure_cycles < 4:
            raise ValueError("measure_cycles must be at least 4")
        if self.settle_cycles < 0:
            raise ValueError("settle_cycles must be non-negative")
        if self.drive_amplitude == 0:
            raise DegenerateDrive("zero drive amplitude gives no response ratio")
        if not (math.isfinite(self.drive_amplitude) and self.drive_amplitude > 0):
            raise ValueError("drive_amplitude must be positive")

    def amplitude_at(self, f: float) -> float:
        if self.level_corner_hz <= 0:
            return self.drive_amplitude
        return self.drive_amplitude * max(1.0, f / self.level_corner_hz)


@dataclass(frozen=True)
class SweepResult:
    response: FrequencyResponse
    coherence: np.ndarray
    max_excursion: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.coherence, dtype=float)
        if c.shape != self.response.omega.shape or np.any(c < 0) or np.any(c > 1):
            raise ValueError("coherence must lie in [0, 1] with one value per point")


@dataclass(frozen=True)
class _Point:
    freq: float
    amplitude: float
    settle: int
    measure: int


def _schedule(plan: SweepPlan, fs: float) -> list:
    points = []
    for f in plan.frequencies:
        cycles = max(plan.measure_cycles, math.ceil(f * plan.min_measure))
        measure = int(round(cycles * fs / f))
        settle = int(math.ceil(max(plan.settle_cycles / f, plan.min_settle) * fs))
        # coherent: an integer number of cycles in exactly `measure` samples
        points.append(_Point(cycles * fs / measure, plan.amplitude_at(f), settle, measure))
    return points


def _project(y: np.ndarray, u: np.ndarray, t: np.ndarray, omega: float, dt: float):
    ph = np.exp(-1j * omega * t)
    yc = 2.0 * np.mean(y * ph)
    uc = 2.0 * np.mean(u * ph)
    # fundamental of the zero-order-hold staircase relative to the samples
    x = omega * dt
    hold = (1 - np.exp(-1j * x)) / (1j * x)
    var = np.var(y)
    coh = 0.0 if var == 0 else min(1.0, 0.5 * abs(yc) ** 2 / var)
    return yc / (uc * hold), coh


def swept_sine(scenario: Scenario, plan: SweepPlan) -> SweepResult:
    """Open-loop stepped-sine response from programming voltage to photocurrent.

    Each point is projected onto a single DFT bin over a whole number of
    drive cycles.  With ``reset_between_points`` each frequency is a fresh
    run from the prepared spin state, seeded ``scenario.seed + index``.
    """
    scenario = scenario.with_(controller=None)
    fs = scenario.sample_rate
    dt = scenario.dt
    points = _schedule(plan, fs)
    segments = []
    if plan.reset_between_points:
        for i, pt in enumerate(points):
            n = pt.settle + pt.measure
            sc = scenario.with_(duration=n * dt)
            t = np.arange(sc.n_samples) * dt
            u = pt.amplitude * np.sin(2 * np.pi * pt.freq * t)
            rec = simulate(sc, seed=scenario.seed + i, u_inject=u, feedback=False, mode="sweep")
            segments.append((rec, pt.settle, pt))
    else:
        total = sum(pt.settle + pt.measure for pt in points)
        sc = scenario.with_(duration=total * dt)
        u = np.zeros(sc.n_samples)
        bounds, k = [], 0
        for pt in points:
            n = pt.settle + pt.measure
            tl = np.arange(n) * dt
            u[k : k + n] = pt.amplitude * np.sin(2 * np.pi * pt.freq * tl)
            bounds.append((k, pt))
            k += n
        rec = simulate(sc, u_inject=u, feedback=False, mode="sweep")
        segments = [(rec, start + pt.settle, pt) for start, pt in bounds]

    values, coherence, worst = [], [], 0.0
    for rec, start, pt in segments:
        sl = slice(start, start + pt.measure)
        excursion = float(np.max(np.abs(rec.fz[sl]) / rec.f_norm[sl]))
        worst = max(worst, excursion)
        if excursion > LINEAR_LIMIT:
            raise NonlinearRegime(
                f"|fz|/|F| reached {excursion:.3g} at {pt.freq:.4g} Hz; lower the drive amplitude"
            )
        t_local = rec.t[sl] - rec.t[start]
        h, coh = _project(rec.y[sl], rec.u[sl], t_local, 2 * np.pi * pt.freq, dt)
        values.append(h)
        coherence.append(coh)
    omega = np.array([2 * np.pi * pt.freq for pt in points])
    return SweepResult(FrequencyResponse(omega, np.array(values)), np.array(coherence), worst)


# rational fitting ---------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    tf: RationalTF
    residual: float
    iterations: int
    condition: float


def fit_rational(
    response: FrequencyResponse,
    n_zeros: int,
    n_poles: int,
    *,
    weights=None,
    max_iter: int = 10,
    tol: float = 1e-9,
    full_output: bool = False,
):
    """Levy least-squares fit refined by Sanathanan-Koerner iterations.

    Frequencies are scaled by their geometric mean before fitting.  The
    default weights are ``1 / |H|`` so every point counts by its relative
    error.  The denominator is returned monic.
    """
    if n_zeros < 0 or n_poles < n_zeros:
        raise ValueError("need 0 <= n_zeros <= n_poles")
    omega = response.omega
    h = response.values
    if len(omega) < 2 * (n_zeros + n_poles + 1):
        raise ValueError("too few frequency points for the requested order")
    if np.any(omega <= 0):
        raise ValueError("fit frequencies must be positive")
    if weights is None:
        weights = 1.0 / np.maximum(np.abs(h), np.finfo(float).tiny)
    weights = np.asarray(weights, dtype=float)

    w0 = float(np.exp(np.mean(np.log(omega))))
    s = 1j * omega / w0
    sn = s[:, None] ** np.arange(n_zeros + 1)[None, :]
    sd = s[:, None] ** np.arange(n_poles)[None, :]
    a_mat = np.hstack([sn, -h[:, None] * sd])
    rhs = h * s**n_poles

    sk = np.ones_like(omega)
    coef = None
    cond = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        wt = weights / sk
        a_w = a_mat * wt[:, None]
        real_a = np.vstack([a_w.real, a_w.imag])
        real_b = np.concatenate([(rhs * wt).real, (rhs * wt).imag])
        scale = np.linalg.norm(real_a, axis=0)
        scale[scale == 0] = 1.0
        cond = float(np.linalg.cond(real_a / scale) ** 2)
        if cond > MAX_CONDITION:
            raise IllConditioned(f"normal-equation condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
        sol = np.linalg.lstsq(real_a / scale, real_b, rcond=None)[0] / scale
        den_scaled = np.concatenate([sol[n_zeros + 1 :], [1.0]])
        sk = np.abs(np.polynomial.polynomial.polyval(s, den_scaled))
        change = math.inf if coef is None else np.linalg.norm(sol - coef) / max(np.linalg.norm(sol), 1e-300)
        coef = sol
        if change < tol:
            break

    num = coef[: n_zeros + 1] / w0 ** np.arange(n_zeros + 1)
    den = np.concatenate([coef[n_zeros + 1 :], [1.0]]) / w0 ** np.arange(n_poles + 1)
    tf = RationalTF(tuple(num), tuple(den))
    fit = tf(1j * omega)
    residual = float(np.linalg.norm(fit - h) / np.linalg.norm(h))
    if full_output:
        return FitResult(tf, residual, it, cond)
    return tf


# atom-number robustness sweep ---------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    n: float
    closed_rms_mean: float
    closed_rms_std: float
    open_rms_mean: float
    open_rms_std: float
    failed_cells: int = 0
    closed_rms: tuple = ()
    open_rms: tuple = ()
    open_b_est: tuple = ()

    def as_csv_row(self) -> list:
        return [repr(float(self.n)), repr(self.closed_rms_mean), repr(self.closed_rms_std),
                repr(self.open_rms_mean), repr(self.open_rms_std), str(self.failed_cells)]


@dataclass(frozen=True)
class _Cell:
    scenario: Scenario
    replicate: int
    assumed_n: float
    open_window: float
    error_window: tuple


def _run_cell(cell: _Cell) -> dict:
    sc = cell.scenario
    seed = sc.seed + cell.replicate
    out = {"closed": math.nan, "open": math.nan, "open_b_est": math.nan, "error": None}
    try:
        rec = run_closed_loop(sc, seed=seed)
        out["closed"] = estimation_error([rec], window=cell.error_window).rms_g
    except LoopmagError as exc:
        out["error"] = f"closed: {exc}"
    try:
        est = run_open_loop(sc, cell.assumed_n, cell.open_window, seed=seed)
        out["open"] = estimation_error([est.record], window=cell.error_window).rms_g
        out["open_b_est"] = est.b_est
    except LoopmagError as exc:
        out["error"] = ((out["error"] + "; ") if out["error"] else "") + f"open: {exc}"
    return out


def _stats(values) -> tuple:
    v = np.array([x for x in values if math.isfinite(x)])
    if v.size == 0:
        return math.nan, math.nan
    return float(np.mean(v)), float(np.std(v))


def default_jobs() -> int:
    return os.cpu_count() or 1


def robustness_sweep(
    base: Scenario,
    atom_numbers,
    replicates: int,
    *,
    jobs: int = 1,
    error_window: tuple = (1e-3, 5e-3),
    open_window: float | None = None,
    n_log_sigma: float = 0.0,
    progress=None,
) -> list:
    """Fixed nominal controller against several true atom numbers.

    Every cell ``(n, replicate)`` runs the closed loop and the open-loop
    estimator (which assumes ``n_nominal`` atoms, optionally miscalibrated
    by a log-normal factor of width ``n_log_sigma``) with seed
    ``base.seed + replicate``.  Rows come back in the order of
    ``atom_numbers`` whatever order the workers finish in.
    """
    atom_numbers = [float(n) for n in atom_numbers]
    if not atom_numbers:
        raise ValueError("atom_numbers must not be empty")
    if any(not n > 0 for n in atom_numbers):
        raise ValueError("atom numbers must be positive")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    if base.controller is None:
        raise ValueError("robustness sweep needs the nominal controller")
    if open_window is None:
        amp = abs(base.waveform.amplitude) or 1.0
        open_window = min(1e-6, 0.1 / (base.params.gamma * amp))
    open_window = max(open_window, 2 * base.dt)

    cells = []
    for n in atom_numbers:
        for r in range(replicates):
            assumed = base.params.n_nominal
            if n_log_sigma > 0:
                assumed *= math.exp(n_log_sigma * make_rng(base.seed + r).standard_normal())
            cells.append(_Cell(base.with_(n_atoms=n), r, assumed, open_window, error_window))

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = []
            for cell, res in zip(cells, pool.map(_run_cell, cells)):
                results.append(res)
                _report(progress, cell, res)
    else:
        results = []
        for cell in cells:
            res = _run_cell(cell)
            results.append(res)
            _report(progress, cell, res)

    rows = []
    for i, n in enumerate(atom_numbers):
        chunk = results[i * replicates : (i + 1) * replicates]
        closed = [c["closed"] for c in chunk]
        opened = [c["open"] for c in chunk]
        failed = sum(1 for c in chunk if c["error"])
        rows.append(SweepRow(
            n, *_stats(closed), *_stats(opened), failed_cells=failed,
            closed_rms=tuple(closed), open_rms=tuple(opened),
            open_b_est=tuple(c["open_b_est"] for c in chunk),
        ))
    return rows


def _report(progress, cell: _Cell, res: dict) -> None:
    if res["error"]:
        log.warning("cell n=%g replicate=%d: %s", cell.scenario.atoms, cell.replicate, res["error"])
    if progress is not None:
        progress(cell.scenario.atoms, cell.replicate, res)


def sweep_table_csv(rows, target, comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for row in rows:
        writer.writerow(row.as_csv_row())
    Path(target).write_text(buf.getvalue())
