"""Real-coefficient rational transfer functions of the Laplace variable ``s``.

Polynomials are stored in ascending-degree order (``num[i]`` multiplies
``s**i``), and the denominator is normalised so its highest-degree
coefficient is 1.  Arithmetic is exact polynomial arithmetic; the only
simplification performed is cancellation of numerator/denominator roots that
coincide to within ``CANCEL_RTOL``.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass
from numbers import Real
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import DegreeOverflow, EvaluationAtPole

log = logging.getLogger(__name__)

MAX_DEGREE = 10
CANCEL_RTOL = 1e-7
_REAL_RTOL = 1e-9

FREQUENCY_RESPONSE_HEADER = ("omega_rad_s", "re", "im", "mag_db", "phase_deg")


def _trim(coeffs) -> np.ndarray:
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    nonzero = np.flatnonzero(c)
    if nonzero.size == 0:
        return np.zeros(1)
    return c[: nonzero[-1] + 1]


@dataclass(frozen=True)
class RationalTF:
    """``num(s) / den(s)`` with ascending-degree coefficient tuples."""

    num: tuple
    den: tuple

    def __post_init__(self):
        num = _trim(self.num)
        den = _trim(self.den)
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise ValueError("transfer function coefficients must be finite")
        if not np.any(den):
            raise ZeroDivisionError("denominator is the zero polynomial")
        if len(num) - 1 > MAX_DEGREE or len(den) - 1 > MAX_DEGREE:
            raise DegreeOverflow(
                f"degree ({len(num) - 1}, {len(den) - 1}) exceeds bound {MAX_DEGREE}"
            )
        if not np.any(num):
            num, den = np.zeros(1), np.ones(1)
        else:
            lead = den[-1]
            num, den = num / lead, den / lead
        object.__setattr__(self, "num", tuple(float(x) for x in num))
        object.__setattr__(self, "den", tuple(float(x) for x in den))

    @classmethod
    def constant(cls, k: float) -> "RationalTF":
        return cls((float(k),), (1.0,))

    @classmethod
    def coerce(cls, value) -> "RationalTF":
        if isinstance(value, RationalTF):
            return value
        if isinstance(value, Real):
            return cls.constant(float(value))
        raise TypeError(f"cannot interpret {value!r} as a transfer function")

    @property
    def num_degree(self) -> int:
        return len(self.num) - 1

    @property
    def den_degree(self) -> int:
        return len(self.den) - 1

    @property
    def relative_degree(self) -> int:
        return self.den_degree - self.num_degree

    @property
    def is_zero(self) -> bool:
        return self.num == (0.0,)

    def is_proper(self) -> bool:
        return self.is_zero or self.num_degree <= self.den_degree

    def is_strictly_proper(self) -> bool:
        return self.is_zero or self.num_degree < self.den_degree

    def __call__(self, s):
        """Evaluate at complex ``s`` (scalar or array) without pole checks."""
        return npoly.polyval(s, self.num) / npoly.polyval(s, self.den)

    def dc_value(self) -> float:
        """Value at s = 0; raises at a pole."""
        if self.den[0] == 0.0:
            raise EvaluationAtPole("pole at s = 0")
        return self.num[0] / self.den[0]

    # arithmetic -----------------------------------------------------------

    def __mul__(self, other):
        other = RationalTF.coerce(other)
        return _reduced(npoly.polymul(self.num, other.num), npoly.polymul(self.den, other.den))

    __rmul__ = __mul__

    def __add__(self, other):
        other = RationalTF.coerce(other)
        num = npoly.polyadd(npoly.polymul(self.num, other.den), npoly.polymul(other.num, self.den))
        return _reduced(num, npoly.polymul(self.den, other.den))

    __radd__ = __add__

    def __neg__(self):
        return RationalTF(tuple(-x for x in self.num), self.den)

    def __sub__(self, other):
        return self + (-RationalTF.coerce(other))

    def __rsub__(self, other):
        return RationalTF.coerce(other) + (-self)

    def inv(self) -> "RationalTF":
        if self.is_zero:
            raise ZeroDivisionError("inverse of the zero transfer function")
        return RationalTF(self.den, self.num)

    def __truediv__(self, other):
        return self * RationalTF.coerce(other).inv()

    def __rtruediv__(self, other):
        return RationalTF.coerce(other) * self.inv()

    def feedback(self) -> "RationalTF":
        """Unity negative feedback around this open loop: L / (1 + L)."""
        return _reduced(np.asarray(self.num), npoly.polyadd(self.den, self.num))

    def scaled(self, k: float) -> "RationalTF":
        return RationalTF(tuple(k * x for x in self.num), self.den)

    # serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        return {"num": list(self.num), "den": list(self.den)}

    @classmethod
    def from_dict(cls, data: dict) -> "RationalTF":
        extra = set(data) - {"num", "den"}
        if extra:
            raise ValueError(f"unexpected transfer function keys: {sorted(extra)}")
        return cls(tuple(data["num"]), tuple(data["den"]))

    def __repr__(self):
        return f"RationalTF(num={list(self.num)}, den={list(self.den)})"


S = RationalTF((0.0, 1.0), (1.0,))


# roots ----------------------------------------------------------------------


def _enforce_conjugates(roots: np.ndarray) -> np.ndarray:
    roots = np.asarray(roots, dtype=complex)
    mag = np.maximum(np.abs(roots), np.finfo(float).tiny)
    is_real = np.abs(roots.imag) <= _REAL_RTOL * mag
    out = list(roots[is_real].real.astype(complex))
    upper = [r for r in roots[~is_real] if r.imag > 0]
    lower = [r for r in roots[~is_real] if r.imag < 0]
    for u in upper:
        if not lower:
            out.append(complex(u.real, 0.0))
            continue
        j = int(np.argmin([abs(u - l.conjugate()) for l in lower]))
        l = lower.pop(j)
        z = 0.5 * (u + l.conjugate())
        out.extend([z, z.conjugate()])
    out.extend(complex(l.real, 0.0) for l in lower)
    return np.array(out, dtype=complex)


def polynomial_roots(coeffs: Sequence[float]) -> np.ndarray:
    """Roots of an ascending-degree real polynomial.

    Exact-zero low-order coefficients give exact roots at the origin; degree
    1 and 2 use closed forms, higher degrees the companion-matrix eigenvalues.
    """
    c = _trim(coeffs)
    if len(c) == 1:
        return np.zeros(0, dtype=complex)
    n_origin = int(np.flatnonzero(c)[0])
    c = c[n_origin:]
    deg = len(c) - 1
    if deg == 0:
        rest = np.zeros(0, dtype=complex)
    elif deg == 1:
        rest = np.array([-c[0] / c[1]], dtype=complex)
    elif deg == 2:
        a, b, cc = c[2], c[1], c[0]
        disc = b * b - 4.0 * a * cc
        if disc >= 0:
            q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
            rest = np.array([q / a, cc / q], dtype=complex)
        else:
            re = -b / (2.0 * a)
            im = math.sqrt(-disc) / (2.0 * a)
            rest = np.array([complex(re, im), complex(re, -im)])
    else:
        rest = _enforce_conjugates(npoly.polyroots(c))
    return np.concatenate([np.zeros(n_origin, dtype=complex), rest])


def _root_factor(r: complex) -> np.ndarray:
    if r.imag == 0.0:
        return np.array([-r.real, 1.0])
    return np.array([abs(r) ** 2, -2.0 * r.real, 1.0])


def _deflate(poly: np.ndarray, root: complex) -> np.ndarray:
    quotient, _ = npoly.polydiv(poly, _root_factor(root))
    return np.atleast_1d(quotient)


def _reduced(num, den) -> RationalTF:
    """Build a RationalTF after cancelling coincident numerator/denominator roots."""
    num = _trim(num)
    den = _trim(den)
    if not np.any(num) or len(num) == 1 or len(den) == 1:
        return RationalTF(tuple(num), tuple(den))
    zeros = [z for z in polynomial_roots(num) if z.imag >= 0]
    poles = [p for p in polynomial_roots(den) if p.imag >= 0]
    for z in zeros:
        best, best_dist = None, math.inf
        for i, p in enumerate(poles):
            if (z.imag == 0.0) != (p.imag == 0.0):
                continue
            dist = abs(z - p)
            if dist < best_dist:
                best, best_dist = i, dist
        if best is None:
            continue
        p = poles[best]
        if best_dist <= CANCEL_RTOL * max(abs(z), abs(p)):
            num = _deflate(num, z)
            den = _deflate(den, p)
            poles.pop(best)
            log.debug("cancelled zero %s against pole %s", z, p)
    return RationalTF(tuple(num), tuple(den))


@dataclass(frozen=True)
class PoleZeroGain:
    """Factored form: ``gain * prod(s - z) / prod(s - p)``."""

    zeros: tuple
    poles: tuple
    gain: float

    def to_tf(self) -> RationalTF:
        num = np.real(np.poly(np.array(self.zeros, dtype=complex))[::-1]) if self.zeros else np.ones(1)
        den = np.real(np.poly(np.array(self.poles, dtype=complex))[::-1]) if self.poles else np.ones(1)
        return RationalTF(tuple(self.gain * num), tuple(den))


def poles_zeros(tf: RationalTF) -> PoleZeroGain:
    zeros = () if tf.is_zero else tuple(polynomial_roots(tf.num))
    poles = tuple(polynomial_roots(tf.den))
    return PoleZeroGain(zeros=zeros, poles=poles, gain=tf.num[-1])


class Stability(str, enum.Enum):
    STABLE = "stable"
    MARGINAL = "marginal"
    UNSTABLE = "unstable"


def is_stable(tf: RationalTF) -> Stability:
    marginal = False
    for p in polynomial_roots(tf.den):
        tol = 1e-9 * max(1.0, abs(p))
        if p.real > tol:
            return Stability.UNSTABLE
        if p.real >= -tol:
            marginal = True
    return Stability.MARGINAL if marginal else Stability.STABLE


# evaluation -----------------------------------------------------------------


def tf_evaluate(tf: RationalTF, omega: float) -> complex:
    """``tf(j*omega)``."""
    if not math.isfinite(omega) or omega < 0:
        raise ValueError(f"omega must be finite and non-negative, got {omega}")
    s = 1j * omega
    den = npoly.polyval(s, tf.den)
    if abs(den) < 1e-300:
        raise EvaluationAtPole(f"denominator vanishes at omega={omega}")
    return complex(npoly.polyval(s, tf.num) / den)


def tf_combine(a: RationalTF, b: RationalTF, op: str) -> RationalTF:
    if op == "multiply":
        return a * b
    if op == "add":
        return a + b
    if op == "unity_feedback":
        return (a * b).feedback()
    raise ValueError(f"unknown combine op {op!r}")


# frequency response ---------------------------------------------------------


class FrequencyResponse:
    """Complex response sampled on a strictly increasing angular-frequency grid."""

    def __init__(self, omega, values, phase_deg=None):
        omega = np.asarray(omega, dtype=float)
        values = np.asarray(values, dtype=complex)
        if omega.ndim != 1 or omega.shape != values.shape:
            raise ValueError("omega and values must be 1-D arrays of equal length")
        if np.any(omega < 0) or np.any(np.diff(omega) <= 0):
            raise ValueError("omega grid must be non-negative and strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("frequency response values must be finite")
        self.omega = omega
        self.values = values
        self._phase = None if phase_deg is None else np.asarray(phase_deg, dtype=float)

    def __len__(self):
        return len(self.omega)

    @property
    def points(self):
        return list(zip(self.omega.tolist(), self.values.tolist()))

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def magnitude_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(self.magnitude)

    @property
    def phase_deg(self) -> np.ndarray:
        if self._phase is not None:
            return self._phase
        ph = np.degrees(np.unwrap(np.angle(self.values)))
        if ph.size:
            ph -= 360.0 * np.round(ph[0] / 360.0)
        return ph

    def to_csv(self, target, comment: str | None = None) -> None:
        rows = zip(self.omega, self.values.real, self.values.imag, self.magnitude_db, self.phase_deg)
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(FREQUENCY_RESPONSE_HEADER)
        for row in rows:
            writer.writerow([repr(float(x)) for x in row])
        Path(target).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, source) -> "FrequencyResponse":
        lines = [ln for ln in Path(source).read_text().splitlines() if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = tuple(next(reader))
        if header != FREQUENCY_RESPONSE_HEADER:
            raise ValueError(f"unexpected header {header}")
        data = np.array([[float(x) for x in row] for row in reader])
        return cls(data[:, 0], data[:, 1] + 1j * data[:, 2], data[:, 4])


def _branch_angle(x: np.ndarray, right_half: bool) -> np.ndarray:
    ang = np.angle(x)
    if right_half:
        ang = np.mod(ang, 2 * np.pi)
    return ang


def continuous_phase_deg(tf: RationalTF, omega) -> np.ndarray:
    """Phase of ``tf(j*omega)`` unwrapped continuously from the DC limit.

    Near s = 0 the function behaves as ``c * s**m``; the phase there is taken
    as ``90*m`` for ``c > 0`` and ``90*m - 180`` for ``c < 0``.
    """
    omega = np.asarray(omega, dtype=float)
    if tf.is_zero:
        return np.zeros_like(omega)
    pz = poles_zeros(tf)
    num = np.asarray(tf.num)
    den = np.asarray(tf.den)
    kz = int(np.flatnonzero(num)[0])
    kp = int(np.flatnonzero(den)[0])
    c = num[kz] / den[kp]
    phase = np.full_like(omega, 0.5 * np.pi * (kz - kp) - (np.pi if c < 0 else 0.0))
    s = 1j * omega
    for roots, sign in ((pz.zeros, 1.0), (pz.poles, -1.0)):
        for r in roots:
            if r == 0:
                continue
            rhp = r.real > 0
            phase += sign * (_branch_angle(s - r, rhp) - _branch_angle(np.array(-r), rhp))
    return np.degrees(phase)


def bode(tf: RationalTF, grid) -> FrequencyResponse:
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("bode grid must be strictly increasing")
    values = np.array([tf_evaluate(tf, w) for w in grid])
    return FrequencyResponse(grid, values, continuous_phase_deg(tf, grid))
