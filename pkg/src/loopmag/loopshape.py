"""Loop-shaping controller synthesis around a minimum-phase/all-pass split.

The design is ``C = Q / (1 - P Q)`` with ``Q = W / P_mp`` (tracking
convention), which makes the nominal closed loop equal to ``W * P_ap``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EvaluationAtPole,
    ImproperQ,
    NoCrossover,
    UnstableClosedLoop,
    UnstablePlant,
    ZeroOnImaginaryAxis,
)
from .tfcore import (
    RationalTF,
    Stability,
    _deflate,
    continuous_phase_deg,
    is_stable,
    poles_zeros,
    tf_evaluate,
)

log = logging.getLogger(__name__)

MARGIN_GRID = (1.0, 1e8, 2000)
MARGIN_RTOL = 1e-6


class Convention(str, enum.Enum):
    TRACKING_MINUS = "tracking_minus"
    PAPER_PLUS = "paper_plus"


@dataclass(frozen=True)
class Factorization:
    p_mp: RationalTF
    p_ap: RationalTF


@dataclass(frozen=True)
class Margins:
    gain_margin_db: float
    phase_margin_deg: float
    crossover_rad_s: float
    phase_crossover_rad_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "gain_margin_db": self.gain_margin_db,
            "phase_margin_deg": self.phase_margin_deg,
            "crossover_rad_s": self.crossover_rad_s,
            "phase_crossover_rad_s": self.phase_crossover_rad_s,
        }


@dataclass(frozen=True)
class ControllerDesign:
    w: RationalTF
    q: RationalTF
    c: RationalTF
    t: RationalTF
    sign_convention: Convention
    plant: RationalTF
    closed_loop_stable: bool = True
    margins: Margins | None = None

    @property
    def weight_corner_hz(self) -> float:
        """Largest pole magnitude of the weight, in Hz."""
        poles = poles_zeros(self.w).poles
        return max((abs(p) for p in poles), default=0.0) / (2 * math.pi)

    def to_dict(self) -> dict:
        def _json_float(x):
            return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")

        margins = None
        if self.margins is not None:
            margins = {k: (None if v is None else _json_float(v)) for k, v in self.margins.to_dict().items()}
        return {
            "convention": self.sign_convention.value,
            "plant": self.plant.to_dict(),
            "w": self.w.to_dict(),
            "q": self.q.to_dict(),
            "c": self.c.to_dict(),
            "t": self.t.to_dict(),
            "closed_loop_stable": self.closed_loop_stable,
            "margins": margins,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ControllerDesign":
        margins = None
        if data.get("margins"):
            m = {k: (None if v is None else float(v)) for k, v in data["margins"].items()}
            margins = Margins(**m)
        return cls(
            w=RationalTF.from_dict(data["w"]),
            q=RationalTF.from_dict(data["q"]),
            c=RationalTF.from_dict(data["c"]),
            t=RationalTF.from_dict(data["t"]),
            sign_convention=Convention(data["convention"]),
            plant=RationalTF.from_dict(data["plant"]),
            closed_loop_stable=bool(data.get("closed_loop_stable", True)),
            margins=margins,
        )


def factor_minphase_allpass(p: RationalTF) -> Factorization:
    """Split a stable plant into ``p_mp * p_ap``.

    Right-half-plane zeros are reflected to ``-conj(z)``; each reflected zero
    contributes an all-pass factor ``(z - s) / (conj(z) + s)``.
    """
    if is_stable(p) is not Stability.STABLE:
        raise UnstablePlant("minimum-phase factorization requires a stable plant")
    num = np.asarray(p.num)
    ap_num = np.ones(1)
    ap_den = np.ones(1)
    if not p.is_zero:
        for z in poles_zeros(p).zeros:
            if abs(z.real) <= 1e-9 * abs(z):
                raise ZeroOnImaginaryAxis(f"zero {z} lies on the imaginary axis")
        for z in poles_zeros(p).zeros:
            if z.real <= 0 or z.imag < 0:
                continue
            num = _deflate(num, z)
            if z.imag == 0.0:
                # (z - s) over (z + s); moving (s - z) out of num costs a sign
                num = -np.polynomial.polynomial.polymul(num, [z.real, 1.0])
                ap_num = np.polynomial.polynomial.polymul(ap_num, [z.real, -1.0])
                ap_den = np.polynomial.polynomial.polymul(ap_den, [z.real, 1.0])
            else:
                mag2 = abs(z) ** 2
                num = np.polynomial.polynomial.polymul(num, [mag2, 2 * z.real, 1.0])
                ap_num = np.polynomial.polynomial.polymul(ap_num, [mag2, -2 * z.real, 1.0])
                ap_den = np.polynomial.polynomial.polymul(ap_den, [mag2, 2 * z.real, 1.0])
    return Factorization(
        p_mp=RationalTF(tuple(num), p.den),
        p_ap=RationalTF(tuple(ap_num), tuple(ap_den)),
    )


def butterworth1(fc: float) -> RationalTF:
    """Single-pole low-pass ``wc / (s + wc)`` with ``wc = 2*pi*fc``."""
    if not fc > 0:
        raise ValueError("corner frequency must be positive")
    wc = 2 * math.pi * fc
    return RationalTF((wc,), (wc, 1.0))


def closed_loop_T(c: RationalTF, p: RationalTF) -> RationalTF:
    return (c * p).feedback()


def synthesize_controller(
    p: RationalTF,
    w: RationalTF,
    convention: Convention | str = Convention.TRACKING_MINUS,
) -> ControllerDesign:
    """Weighted-Q loop-shaping design.

    Under ``paper_plus`` (``C = Q/(1 + PQ)``) an unstable closed loop is only
    logged, since that convention is kept for comparison; under
    ``tracking_minus`` it raises ``UnstableClosedLoop``.
    """
    convention = Convention(convention)
    fac = factor_minphase_allpass(p)
    q = w / fac.p_mp
    if not q.is_proper():
        raise ImproperQ(
            f"Q = W/P_mp has numerator degree {q.num_degree} > denominator degree {q.den_degree}"
        )
    pq = p * q
    c = q / (1 - pq) if convention is Convention.TRACKING_MINUS else q / (1 + pq)
    t = closed_loop_T(c, p)
    stable = is_stable(t) is Stability.STABLE
    if not stable:
        if convention is Convention.TRACKING_MINUS:
            raise UnstableClosedLoop(f"closed loop has poles {poles_zeros(t).poles}")
        log.warning("closed loop under %s convention is not stable", convention.value)
    try:
        margins = stability_margins(c * p)
    except NoCrossover:
        margins = None
    return ControllerDesign(
        w=w, q=q, c=c, t=t, sign_convention=convention, plant=p,
        closed_loop_stable=stable, margins=margins,
    )


def tracking_error_norm(t: RationalTF, band) -> float:
    """``sup |1 - T(jw)|`` over 500 log-spaced points in ``band`` (rad/s)."""
    lo, hi = band
    if not 0 < lo < hi:
        raise ValueError("band must satisfy 0 < lo < hi")
    grid = np.geomspace(lo, hi, 500)
    return float(max(abs(1 - tf_evaluate(t, w)) for w in grid))


def _bisect(f, lo: float, hi: float) -> float:
    flo = f(lo)
    while hi / lo - 1 > MARGIN_RTOL:
        mid = math.sqrt(lo * hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return math.sqrt(lo * hi)


def _first_crossing(f, grid: np.ndarray) -> float | None:
    values = np.array([f(w) for w in grid])
    for i, v in enumerate(values):
        if v == 0:
            return float(grid[i])
        if i and (v > 0) != (values[i - 1] > 0):
            return _bisect(f, float(grid[i - 1]), float(grid[i]))
    return None


def stability_margins(l: RationalTF, grid=None) -> Margins:
    """Phase margin at the first unity-gain crossing, gain margin at the
    first -180 degree phase crossing (``+inf`` when there is none)."""
    if grid is None:
        lo, hi, n = MARGIN_GRID
        grid = np.geomspace(lo, hi, n)

    def log_mag(w):
        try:
            return math.log(abs(tf_evaluate(l, w)))
        except (EvaluationAtPole, ValueError):
            return math.inf

    def phase(w):
        return float(continuous_phase_deg(l, [w])[0])

    wc = _first_crossing(log_mag, grid)
    if wc is None:
        raise NoCrossover("|L| does not cross unity on the scan grid")
    pm = 180.0 + phase(wc)

    ph = np.array([phase(w) for w in grid])
    # nearest odd multiple of 180 below the low-frequency phase
    target = -180.0 + 360.0 * math.floor((ph[0] + 180.0) / 360.0)
    wp = _first_crossing(lambda w: phase(w) - target, grid)
    if wp is None:
        gm = math.inf
    else:
        gm = -20.0 * math.log10(abs(tf_evaluate(l, wp)))
    return Margins(gain_margin_db=gm, phase_margin_deg=pm, crossover_rad_s=wc, phase_crossover_rad_s=wp)


def perturbed_closed_loop(design: ControllerDesign, gain: float) -> RationalTF:
    """Closed loop of the fixed controller around ``gain * plant``."""
    return closed_loop_T(design.c, design.plant.scaled(gain))
