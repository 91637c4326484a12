"""Digital controller realisation and closed/open-loop experiment runs."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from . import _kernels
from .errors import GridMismatch, NumericalDivergence, UnstableDiscretization, WindowTooLong
from .loopshape import ControllerDesign
from .physim import (
    ActuatorModel,
    BlochState,
    FieldWaveform,
    PhysParams,
    actuator_tf,
    make_rng,
    relax_half_factor,
)
from .tfcore import RationalTF, poles_zeros, tf_evaluate

DEFAULT_SAMPLE_RATE = 5e6
MAX_SAMPLES = 100_000_000
# sample rate must exceed this multiple of the weight corner (see README)
MIN_RATE_OVER_CORNER = 4.0
REFIT_EXTRA_TAPS = 2
REFIT_POINTS = 400
# programming-voltage bound; a loop driving the supply past it has run away
U_LIMIT = 50.0
RECORD_HEADER = ("t", "b_true_G", "y_V", "u_V", "b_c_G", "b_est_G")


# discretisation ---------------------------------------------------------------


@dataclass
class DiscreteFilter:
    """Cascade of biquads, rows ``[b0, b1, b2, 1, a1, a2]``."""

    sections: np.ndarray
    sample_rate: float
    state: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sections = np.ascontiguousarray(np.atleast_2d(np.asarray(self.sections, dtype=float)))
        if self.sections.shape[1] != 6:
            raise ValueError("sections must have six columns")
        if self.state is None:
            self.reset()

    def reset(self) -> None:
        self.state = np.zeros((self.sections.shape[0], 2))

    def step(self, x: float) -> float:
        return _kernels.sos_step(self.sections, self.state, float(x))

    def filter(self, xs) -> np.ndarray:
        return _kernels.sos_filter(self.sections, self.state, np.asarray(xs, dtype=float))

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, row[4], row[5]]) for row in self.sections])

    def response(self, omega) -> np.ndarray:
        _, h = signal.sosfreqz(self.sections, worN=np.asarray(omega, dtype=float), fs=2 * np.pi * self.sample_rate)
        return h


def _bilinear_point(r: complex, k: float) -> complex:
    return (k + r) / (k - r)


def discretize_bilinear(
    c: RationalTF,
    sample_rate: float,
    prewarp_at: float | None = None,
    refit: bool = True,
) -> DiscreteFilter:
    """Tustin map of ``c`` into second-order sections.

    Poles are always the bilinear images of the continuous poles, so a
    stable ``c`` gives a stable filter.  Plain Tustin compresses frequency
    by ``tan(x)/x`` and is several percent off in magnitude at a tenth of
    the sample rate whatever the prewarp point, so by default the numerator
    is refitted with ``REFIT_EXTRA_TAPS`` extra taps by relative-error least
    squares against ``c`` up to ``sample_rate / 10``.
    """
    if not c.is_proper():
        raise ValueError("controller must be proper to discretise")
    if not sample_rate > 0:
        raise ValueError("sample_rate must be positive")
    t = 1.0 / sample_rate
    if prewarp_at is None:
        k = 2.0 / t
    else:
        if not 0 < prewarp_at < math.pi * sample_rate:
            raise ValueError("prewarp frequency must lie below the Nyquist frequency")
        k = prewarp_at / math.tan(prewarp_at * t / 2)

    pz = poles_zeros(c)
    n = len(pz.poles)
    zp = np.array([_bilinear_point(p, k) for p in pz.poles], dtype=complex)
    if np.any(np.abs(zp) > 1 + 1e-12) and all(p.real < 0 for p in pz.poles):
        raise UnstableDiscretization("bilinear map produced a pole outside the unit circle")

    if c.is_zero:
        return DiscreteFilter(np.array([[0.0, 0, 0, 1, 0, 0]]), sample_rate)
    if not refit or n == 0:
        zz = np.array([_bilinear_point(z, k) for z in pz.zeros], dtype=complex)
        # the relative degree maps to zeros at z = -1
        zz = np.concatenate([zz, -np.ones(n - len(zz))])
        gain = pz.gain * np.prod([k - z for z in pz.zeros]) / np.prod([k - p for p in pz.poles])
        return _to_filter(zz, zp, float(np.real(gain)), sample_rate)

    a = np.real(np.poly(zp))  # descending powers of z, i.e. ascending z^-1
    m = n + REFIT_EXTRA_TAPS
    a = np.concatenate([a, np.zeros(REFIT_EXTRA_TAPS)])
    w = np.geomspace(2 * np.pi * 1.0, 2 * np.pi * sample_rate / 10, REFIT_POINTS)
    zinv = np.exp(-1j * w * t)
    target = np.array([tf_evaluate(c, wi) for wi in w]) * np.polyval(a[::-1], zinv)
    basis = zinv[:, None] ** np.arange(m + 1)[None, :]
    weight = 1.0 / np.abs(target)
    lhs = basis * weight[:, None]
    rhs = target * weight
    b, *_ = np.linalg.lstsq(np.vstack([lhs.real, lhs.imag]), np.concatenate([rhs.real, rhs.imag]), rcond=None)
    if b[0] == 0.0:
        sos = signal.tf2sos(b, a, pairing="nearest")
        return DiscreteFilter(sos, sample_rate)
    # np.roots reads b as descending powers of z, which is B(z^-1) * z^m
    zp_full = np.concatenate([zp, np.zeros(REFIT_EXTRA_TAPS)])
    return _to_filter(np.roots(b), zp_full, float(b[0]), sample_rate)


def _to_filter(zeros, poles, gain, sample_rate) -> DiscreteFilter:
    n = max(len(zeros), len(poles))
    if n == 0:
        return DiscreteFilter(np.array([[gain, 0, 0, 1, 0, 0]]), sample_rate)
    zeros = np.concatenate([zeros, np.zeros(n - len(zeros))])
    poles = np.concatenate([poles, np.zeros(n - len(poles))])
    return DiscreteFilter(signal.zpk2sos(zeros, poles, gain, pairing="nearest"), sample_rate)


# scenario and records -----------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    params: PhysParams = field(default_factory=PhysParams)
    waveform: FieldWaveform = field(default_factory=FieldWaveform)
    controller: ControllerDesign | None = None
    reference: float = 0.0
    duration: float = 5e-3
    sample_rate: float = DEFAULT_SAMPLE_RATE
    feedback_on_at: float = 0.0
    seed: int = 0
    replicates: int = 1
    n_atoms: float | None = None
    refit: bool = True
    u_limit: float = U_LIMIT

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if self.duration * self.sample_rate > MAX_SAMPLES:
            raise ValueError("scenario exceeds the sample budget")
        if 1.0 / self.sample_rate > 1e-6 * (1 + 1e-12):
            raise ValueError("sample_rate must be at least 1 MHz so physics steps resolve the loop")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.u_limit > 0:
            raise ValueError("u_limit must be positive")
        if self.n_atoms is not None and not self.n_atoms > 0:
            raise ValueError("n_atoms must be positive")
        if self.controller is not None:
            corner = self.controller.weight_corner_hz
            if self.sample_rate < MIN_RATE_OVER_CORNER * corner:
                raise ValueError(
                    f"sample_rate {self.sample_rate:g} Hz is below {MIN_RATE_OVER_CORNER:g}x "
                    f"the weight corner {corner:g} Hz"
                )

    @property
    def atoms(self) -> float:
        return self.params.n_nominal if self.n_atoms is None else self.n_atoms

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "waveform": self.waveform.to_dict(),
            "controller": None if self.controller is None else self.controller.to_dict(),
            "reference": self.reference,
            "duration": self.duration,
            "sample_rate": self.sample_rate,
            "feedback_on_at": self.feedback_on_at,
            "seed": self.seed,
            "replicates": self.replicates,
            "n_atoms": self.atoms,
            "refit": self.refit,
            "u_limit": self.u_limit,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class LoopRecord:
    t: np.ndarray
    b_true: np.ndarray
    y: np.ndarray
    u: np.ndarray
    b_c: np.ndarray
    b_est: np.ndarray
    metadata: dict = field(default_factory=dict)
    fz: np.ndarray | None = field(default=None, repr=False)
    f_norm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        cols = self.columns()
        n = len(cols[0])
        if any(len(c) != n for c in cols):
            raise ValueError("record columns must have equal length")
        if n > 1:
            d = np.diff(self.t)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * d[0] * n:
                raise ValueError("record time base must be uniform and increasing")

    def columns(self):
        return [self.t, self.b_true, self.y, self.u, self.b_c, self.b_est]

    def __len__(self):
        return len(self.t)

    def to_csv(self, target, comment: str | None = None) -> None:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_HEADER)
        for row in zip(*self.columns()):
            writer.writerow([repr(float(x)) for x in row])
        Path(target).write_text(buf.getvalue())

    def write(self, target, comment: str | None = None) -> Path:
        """CSV plus a ``.json`` metadata sidecar next to it."""
        target = Path(target)
        self.to_csv(target, comment)
        sidecar = target.with_suffix(".json")
        sidecar.write_text(json.dumps(self.metadata, sort_keys=True, indent=2) + "\n")
        return sidecar

    @classmethod
    def from_csv(cls, source) -> "LoopRecord":
        source = Path(source)
        lines = [ln for ln in source.read_text().splitlines() if not ln.startswith("#")]
        reader = csv.reader(lines)
        if tuple(next(reader)) != RECORD_HEADER:
            raise ValueError("unexpected record header")
        data = np.array([[float(x) for x in row] for row in reader]).reshape(-1, 6)
        sidecar = source.with_suffix(".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(*data.T, metadata=meta)

    def window(self, t_start: float, t_end: float) -> "LoopRecord":
        keep = (self.t >= t_start) & (self.t <= t_end)
        extras = {}
        if self.fz is not None:
            extras = {"fz": self.fz[keep], "f_norm": self.f_norm[keep]}
        return LoopRecord(*(c[keep] for c in self.columns()), metadata=dict(self.metadata), **extras)


# simulation -------------------------------------------------------------------


def prepared_state(params: PhysParams, n_atoms: float) -> BlochState:
    """Spin at its pumped operating point (fully polarised without pumping)."""
    return BlochState(params.operating_fx(n_atoms), 0.0, 0.0, n_atoms)


def controller_filter(scenario: Scenario) -> DiscreteFilter:
    return discretize_bilinear(scenario.controller.c, scenario.sample_rate, refit=scenario.refit)


def _metadata(scenario: Scenario, seed: int, mode: str) -> dict:
    return {
        "mode": mode,
        "seed": seed,
        "scenario_sha256": scenario.digest(),
        "convention": None if scenario.controller is None else scenario.controller.sign_convention.value,
        "n_atoms": scenario.atoms,
        "sample_rate_hz": scenario.sample_rate,
    }


def simulate(
    scenario: Scenario,
    *,
    seed: int | None = None,
    u_inject=None,
    feedback: bool = True,
    mode: str = "closed",
) -> LoopRecord:
    """Run the single-rate loop and return the record.

    Per sample ``k``: photocurrent from the current spin, controller output
    (zero before ``feedback_on_at``) plus any injected drive, actuator
    advance, and a spin step under the true plus coil field averaged over
    the sample interval.
    """
    seed = scenario.seed if seed is None else int(seed)
    params = scenario.params
    n = scenario.n_samples
    dt = scenario.dt
    n_atoms = scenario.atoms
    t = np.arange(n) * dt
    b_true = scenario.waveform.step_means(t, dt)
    sigma = params.noise_sigma(dt)
    noise = sigma * make_rng(seed).standard_normal(n) if sigma > 0 else np.zeros(n)
    inject = np.zeros(n) if u_inject is None else np.ascontiguousarray(u_inject, dtype=float)
    if inject.shape != (n,):
        raise ValueError("u_inject must have one value per sample")

    if feedback and scenario.controller is not None:
        filt = controller_filter(scenario)
        fb_start = int(math.ceil(scenario.feedback_on_at * scenario.sample_rate - 1e-9))
    else:
        filt = DiscreteFilter(np.array([[0.0, 0, 0, 1, 0, 0]]), scenario.sample_rate)
        fb_start = n
    act = ActuatorModel(actuator_tf(params))
    zm = act.matrices(dt)
    spin0 = prepared_state(params, n_atoms)
    y, u, bc, fz, fnorm, status = _kernels.run_loop(
        b_true,
        inject,
        noise,
        fb_start,
        filt.sections,
        filt.state,
        zm.ad,
        zm.bd,
        zm.c_mean,
        zm.d_mean,
        zm.c_out,
        zm.d_out,
        act.state,
        np.array([spin0.fx, spin0.fy, spin0.fz]),
        params.gamma,
        dt,
        relax_half_factor(params, dt),
        params.pumped_target(n_atoms),
        params.meas_gain,
        scenario.reference,
        4.0 * n_atoms * (1 + 1e-9),
        scenario.u_limit,
    )
    stop = n if status == _kernels.STATUS_OK else status + 1
    record = LoopRecord(
        t[:stop], b_true[:stop], y[:stop], u[:stop], bc[:stop], -bc[:stop],
        metadata=_metadata(scenario, seed, mode), fz=fz[:stop], f_norm=fnorm[:stop],
    )
    if status != _kernels.STATUS_OK:
        record.metadata["diverged_at_s"] = float(t[status])
        raise NumericalDivergence(
            f"loop left its bounds (|fz| <= 4N, |u| <= {scenario.u_limit:g} V) at t = {t[status]:.6g} s",
            record=record,
            index=int(status),
        )
    return record


def run_closed_loop(scenario: Scenario, *, seed: int | None = None) -> LoopRecord:
    if scenario.controller is None:
        raise ValueError("closed-loop run needs a controller")
    return simulate(scenario, seed=seed)


@dataclass(frozen=True)
class OpenLoopEstimate:
    b_est: float
    window: tuple
    record: LoopRecord


def run_open_loop(
    scenario: Scenario,
    assumed_n: float,
    fit_window: float,
    *,
    fit_start: float | None = None,
    seed: int | None = None,
) -> OpenLoopEstimate:
    """Small-angle estimate from the initial slope of the precession signal.

    The slope of ``y / meas_gain`` over ``[fit_start, fit_start + fit_window]``
    (default start: the waveform's onset) is divided by ``gamma`` times the
    spin length the experimenter believes in, i.e. the operating ``|F|`` for
    ``assumed_n`` atoms.
    """
    if scenario.controller is not None:
        scenario = scenario.with_(controller=None)
    if not assumed_n > 0 or not fit_window > 0:
        raise ValueError("assumed_n and fit_window must be positive")
    rec = simulate(scenario, seed=seed, feedback=False, mode="open")
    t0 = scenario.waveform.start if fit_start is None else fit_start
    sel = (rec.t >= t0 - 1e-12) & (rec.t <= t0 + fit_window + 1e-12)
    if sel.sum() < 2:
        raise ValueError("fit window holds fewer than two samples")
    slope = np.polyfit(rec.t[sel] - t0, rec.y[sel] / scenario.params.meas_gain, 1)[0]
    params = scenario.params
    b_est = slope / (params.gamma * params.operating_fx(assumed_n))
    if params.gamma * abs(b_est) * fit_window > 0.3:
        raise WindowTooLong(
            f"gamma*b*window = {params.gamma * abs(b_est) * fit_window:.3g} exceeds 0.3"
        )
    est = np.where(rec.t >= t0 + fit_window, b_est, 0.0)
    rec = replace(rec, b_est=est, b_c=np.zeros_like(est))
    rec.metadata["b_est_G"] = float(b_est)
    return OpenLoopEstimate(float(b_est), (t0, t0 + fit_window), rec)


# error metrics ----------------------------------------------------------------


@dataclass(frozen=True)
class ErrorStats:
    rms_g: float
    mean: float
    std: float
    per_record_rms: tuple
    per_record_ms: tuple

    def to_dict(self) -> dict:
        return {
            "rms_g": self.rms_g,
            "mean": self.mean,
            "std": self.std,
            "per_record_rms": list(self.per_record_rms),
            "per_record_ms": list(self.per_record_ms),
        }


def _mean_square(t: np.ndarray, err: np.ndarray) -> float:
    if len(t) < 2:
        return float(err[0] ** 2) if len(t) else 0.0
    return float(np.trapezoid(err**2, t) / (t[-1] - t[0]))


def estimation_error(records, b_true=None, window: tuple | None = None) -> ErrorStats:
    """Time-averaged squared mismatch per record and its root, plus ensemble
    statistics of the roots.  ``rms_g`` is the ensemble mean RMS."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    t_ref = records[0].t
    ms = []
    for rec in records:
        if len(rec.t) != len(t_ref) or not np.array_equal(rec.t, t_ref):
            raise GridMismatch("records do not share a time grid")
        truth = rec.b_true if b_true is None else np.asarray(b_true, dtype=float)
        if truth.shape != rec.t.shape:
            raise GridMismatch("b_true series does not match the record grid")
        keep = np.ones(len(rec.t), dtype=bool)
        if window is not None:
            keep = (rec.t >= window[0]) & (rec.t <= window[1])
        ms.append(_mean_square(rec.t[keep], truth[keep] - rec.b_est[keep]))
    rms = np.sqrt(ms)
    return ErrorStats(
        rms_g=float(np.mean(rms)),
        mean=float(np.mean(rms)),
        std=float(np.std(rms)),
        per_record_rms=tuple(float(x) for x in rms),
        per_record_ms=tuple(ms),
    )
