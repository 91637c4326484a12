"""Semiclassical spin-ensemble physics for the magnetometer loop.

The collective spin (units of hbar) precesses about the y axis under the
total field, relaxes isotropically at 1/t2, and is optionally pumped back
toward the fully polarised state ``4 N x`` at ``pump_rate``.  Pumping sets
the operating point and broadens the atomic response: linearised about the
pumped steady state, the photocurrent follows the field through
``k_at / (s + pump_rate + 1/t2)``.

The coil supply is an LTI model from programming voltage (V) to field (G).
With the default constants the composite plant equals the fitted model

    P(s) = 1.6e4 (8.0e5 - s) / (s^2 + 4.1e5 s + 4.0e9)

with the 1e4 rad/s pole assigned to the atoms and the 4e5 rad/s pole plus
the right-half-plane zero assigned to the supply.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import _kernels
from .tfcore import RationalTF, Stability, is_stable

# fitted plant constants
PLANT_GAIN = 1.6e4
PLANT_ZERO = 8.0e5
ATOMIC_POLE = 1.0e4
SUPPLY_POLE = 4.0e5

GAMMA_CS = 2.2e6  # rad/(s G), Cs F=4 ground state, g_F = 1/4
T2 = 11.2e-3
N_NOMINAL = 1e9
BETA = 0.1  # G/V
NOISE_PSD = 1e-15  # V^2/Hz one-sided; ~1 uG/rtHz field-equivalent at N_NOMINAL
MAX_DT = 1e-6


def reference_plant() -> RationalTF:
    """The fitted plant model with literal coefficients."""
    return RationalTF(
        (PLANT_GAIN * PLANT_ZERO, -PLANT_GAIN),
        (ATOMIC_POLE * SUPPLY_POLE, ATOMIC_POLE + SUPPLY_POLE, 1.0),
    )


@dataclass(frozen=True)
class PhysParams:
    gamma: float = GAMMA_CS
    t2: float = T2
    pump_rate: float = ATOMIC_POLE - 1.0 / T2
    meas_gain: float = float("nan")  # nan -> derived, see __post_init__
    noise_psd: float = NOISE_PSD
    beta: float = BETA
    n_nominal: float = N_NOMINAL
    supply_zero: float = PLANT_ZERO
    supply_pole: float = SUPPLY_POLE

    def __post_init__(self):
        for name in ("gamma", "t2", "beta", "n_nominal", "supply_zero", "supply_pole"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if not (self.noise_psd >= 0 and math.isfinite(self.noise_psd)):
            raise ValueError("noise_psd must be finite and non-negative")
        if not (self.pump_rate >= 0 and math.isfinite(self.pump_rate)):
            raise ValueError("pump_rate must be finite and non-negative")
        if math.isnan(self.meas_gain):
            object.__setattr__(self, "meas_gain", self._matched_meas_gain())
        if not self.meas_gain > 0:
            raise ValueError(f"meas_gain must be strictly positive, got {self.meas_gain}")

    def _matched_meas_gain(self) -> float:
        # photocurrent gain making the nominal composite plant gain PLANT_GAIN
        supply = self.beta * self.supply_pole / self.supply_zero
        return PLANT_GAIN / (self.gamma * self.operating_fx(self.n_nominal) * supply)

    @property
    def relax_rate(self) -> float:
        """Total relaxation rate of the spin, i.e. the atomic pole in rad/s."""
        return self.pump_rate + 1.0 / self.t2

    def operating_fx(self, n_atoms: float) -> float:
        """Steady x component under pumping (the prepared value without it)."""
        polarized = 4.0 * n_atoms
        if self.pump_rate == 0:
            return polarized
        return polarized * self.pump_rate / self.relax_rate

    def pumped_target(self, n_atoms: float) -> float:
        return 0.0 if self.pump_rate == 0 else self.operating_fx(n_atoms)

    def noise_sigma(self, dt: float) -> float:
        return math.sqrt(self.noise_psd / (2.0 * dt))

    def with_(self, **changes) -> "PhysParams":
        """Copy with changes; ``meas_gain`` is re-derived unless given."""
        changes.setdefault("meas_gain", float("nan"))
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlochState:
    fx: float
    fy: float
    fz: float
    n_atoms: float

    def __post_init__(self):
        if not self.n_atoms > 0:
            raise ValueError("n_atoms must be positive")

    @classmethod
    def coherent(cls, n_atoms: float) -> "BlochState":
        """Fully polarised along +x: |F| = 4 N."""
        return cls(4.0 * n_atoms, 0.0, 0.0, n_atoms)

    @property
    def magnitude(self) -> float:
        return math.sqrt(self.fx**2 + self.fy**2 + self.fz**2)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz])


def _check_dt(dt: float) -> None:
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}] s, got {dt}")


def relax_half_factor(params: PhysParams, dt: float) -> float:
    return math.exp(-0.5 * params.relax_rate * dt)


def bloch_step(state: BlochState, b_total: float, dt: float, params: PhysParams) -> BlochState:
    """Advance the spin by ``dt`` under a y-directed field ``b_total`` (G).

    Rotation by ``gamma * b_total * dt`` about y is exact, as is the
    relaxation; with ``pump_rate == 0`` this is a rotation followed by the
    uniform decay ``exp(-dt/t2)``.  ``b_total`` is the field averaged over
    the step, since rotations about a fixed axis compose additively.
    """
    _check_dt(dt)
    fx, fy, fz = _kernels.spin_step(
        state.fx,
        state.fy,
        state.fz,
        params.gamma * b_total * dt,
        relax_half_factor(params, dt),
        params.pumped_target(state.n_atoms),
    )
    return BlochState(fx, fy, fz, state.n_atoms)


def measure_sample(state: BlochState, dt: float, params: PhysParams, rng: np.random.Generator) -> float:
    """Photocurrent ``meas_gain * fz + zeta`` with Var(zeta) = psd / (2 dt)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return params.meas_gain * state.fz + params.noise_sigma(dt) * rng.standard_normal()


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every stochastic draw."""
    return np.random.Generator(np.random.Philox(int(seed)))


# field waveforms --------------------------------------------------------------

WAVEFORM_KINDS = ("constant", "step", "sinusoid", "bandlimited_noise", "samples")


@dataclass(frozen=True)
class FieldWaveform:
    """External y-field b(t) in gauss.

    ``amplitude`` is the level for constant/step/sinusoid and the RMS for
    bandlimited_noise, which is a flat comb of ``n_components`` random-phase
    sinusoids spanning ``(0, bandwidth]`` drawn from ``seed``.  Non-constant
    kinds are zero before ``start``.
    """

    kind: str = "constant"
    amplitude: float = 0.0
    start: float = 0.0
    frequency: float = 0.0
    bandwidth: float = 0.0
    seed: int = 0
    n_components: int = 100
    samples: tuple = ()
    sample_dt: float = 0.0
    _comb: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in WAVEFORM_KINDS:
            raise ValueError(f"unknown waveform kind {self.kind!r}")
        if self.kind == "sinusoid" and not self.frequency > 0:
            raise ValueError("sinusoid needs a positive frequency")
        if self.kind == "bandlimited_noise":
            if not self.bandwidth > 0 or self.n_components < 1:
                raise ValueError("bandlimited_noise needs bandwidth > 0 and n_components >= 1")
            freqs = self.bandwidth * np.arange(1, self.n_components + 1) / self.n_components
            phases = make_rng(self.seed).uniform(0.0, 2 * np.pi, self.n_components)
            amps = np.full(self.n_components, self.amplitude * math.sqrt(2.0 / self.n_components))
            object.__setattr__(self, "_comb", (2 * np.pi * freqs, amps, phases))
        if self.kind == "samples" and (len(self.samples) < 1 or not self.sample_dt > 0):
            raise ValueError("samples waveform needs values and a positive sample_dt")

    def _sines(self):
        if self.kind == "sinusoid":
            return np.array([2 * np.pi * self.frequency]), np.array([self.amplitude]), np.zeros(1)
        return self._comb

    def value(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.amplitude)
        on = t >= self.start
        if self.kind == "step":
            return np.where(on, self.amplitude, 0.0)
        if self.kind == "samples":
            knots = self.start + self.sample_dt * np.arange(len(self.samples))
            return np.where(on, np.interp(t, knots, self.samples), 0.0)
        w, a, ph = self._sines()
        tau = (t - self.start)[..., None]
        return np.where(on, np.sum(a * np.sin(w * tau + ph), axis=-1), 0.0)

    def step_means(self, t0, dt: float) -> np.ndarray:
        """Exact mean of b(t) over each ``[t0[k], t0[k] + dt)``."""
        t0 = np.asarray(t0, dtype=float)
        t1 = t0 + dt
        if self.kind == "constant":
            return np.full_like(t0, self.amplitude)
        lo = np.maximum(t0, self.start)
        covered = np.clip(t1 - lo, 0.0, dt)
        if self.kind == "step":
            return self.amplitude * covered / dt
        if self.kind == "samples":
            return (self._samples_integral(t1) - self._samples_integral(lo)) * (covered > 0) / dt
        w, a, ph = self._sines()
        # mean over [lo, t1] of sin(w tau + ph) via the midpoint/sinc identity
        mid = (0.5 * (lo + t1) - self.start)[..., None]
        half = (0.5 * covered)[..., None]
        total = np.sum(a * np.sin(w * mid + ph) * 2 * half * np.sinc(w * half / np.pi), axis=-1)
        return total / dt

    def _samples_integral(self, t):
        vals = np.asarray(self.samples, dtype=float)
        h = self.sample_dt
        tau = np.asarray(t, dtype=float) - self.start
        cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (vals[1:] + vals[:-1]))])
        i = np.clip(np.floor(tau / h).astype(int), 0, len(vals) - 1)
        frac = tau - i * h
        nxt = vals[np.minimum(i + 1, len(vals) - 1)]
        slope = np.where(i < len(vals) - 1, (nxt - vals[i]) / h, 0.0)
        beyond = np.where(i < len(vals) - 1, frac, frac)
        return cum[i] + vals[i] * beyond + 0.5 * slope * np.minimum(frac, h) ** 2

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "amplitude": self.amplitude,
            "start": self.start,
            "frequency": self.frequency,
            "bandwidth": self.bandwidth,
            "seed": self.seed,
            "n_components": self.n_components,
            "samples": list(self.samples),
            "sample_dt": self.sample_dt,
        }
        return d


# actuator ---------------------------------------------------------------------


def state_space(tf: RationalTF):
    """Controllable canonical (A, B, C, D) for a proper transfer function."""
    if not tf.is_proper():
        raise ValueError("state-space realisation needs a proper transfer function")
    n = tf.den_degree
    den = np.asarray(tf.den)
    num = np.zeros(n + 1)
    num[: len(tf.num)] = tf.num
    d = num[n]
    a = np.zeros((n, n))
    if n:
        a[np.arange(n - 1), np.arange(1, n)] = 1.0
        a[-1, :] = -den[:n]
    b = np.zeros(n)
    if n:
        b[-1] = 1.0
    c = num[:n] - d * den[:n]
    return a, b, c, d


@dataclass(frozen=True)
class ZohMatrices:
    ad: np.ndarray
    bd: np.ndarray
    c_mean: np.ndarray
    d_mean: float
    c_out: np.ndarray
    d_out: float


def zoh_discretize(tf: RationalTF, dt: float) -> ZohMatrices:
    """Zero-order-hold step matrices, including the exact step-mean output."""
    a, b, c, d = state_space(tf)
    n = len(b)
    m = np.zeros((n + 2, n + 2))
    m[:n, :n] = a
    m[:n, n + 1] = b
    m[n, :n] = c
    m[n, n + 1] = d
    e = expm(m * dt)
    return ZohMatrices(
        ad=np.ascontiguousarray(e[:n, :n]),
        bd=np.ascontiguousarray(e[:n, n + 1]),
        c_mean=np.ascontiguousarray(e[n, :n] / dt),
        d_mean=float(e[n, n + 1] / dt),
        c_out=np.ascontiguousarray(c),
        d_out=float(d),
    )


class ActuatorModel:
    """Coil supply from programming voltage to field, with mutable state."""

    def __init__(self, tf: RationalTF):
        if is_stable(tf) is not Stability.STABLE:
            raise ValueError("actuator transfer function must be stable")
        self.tf = tf
        self.state = np.zeros(tf.den_degree)
        self._zoh: dict[float, ZohMatrices] = {}

    def matrices(self, dt: float) -> ZohMatrices:
        if dt not in self._zoh:
            self._zoh[dt] = zoh_discretize(self.tf, dt)
        return self._zoh[dt]

    def reset(self) -> None:
        self.state = np.zeros(self.tf.den_degree)


def actuator_tf(params: PhysParams) -> RationalTF:
    """``beta * (p/z) * (z - s) / (s + p)``: unit DC gain times ``beta``."""
    z, p = params.supply_zero, params.supply_pole
    k = params.beta * p / z
    return RationalTF((k * z, -k), (p, 1.0))


def actuator_step(model: ActuatorModel, u: float, dt: float) -> float:
    """Hold ``u`` for ``dt``; returns the mean coil field over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    zm = model.matrices(dt)
    _, b_mean = _kernels.actuator_advance(
        zm.ad, zm.bd, zm.c_mean, zm.d_mean, zm.c_out, zm.d_out, model.state, float(u)
    )
    return b_mean


def atomic_tf(params: PhysParams, n_atoms: float) -> RationalTF:
    """Linearised field-to-photocurrent response about the operating point."""
    k_at = params.meas_gain * params.gamma * params.operating_fx(n_atoms)
    return RationalTF((k_at,), (params.relax_rate, 1.0))


def effective_plant(params: PhysParams, n_atoms: float) -> RationalTF:
    """Programming voltage to photocurrent; gain proportional to ``n_atoms``."""
    if not n_atoms > 0:
        raise ValueError("n_atoms must be positive")
    return actuator_tf(params) * atomic_tf(params, n_atoms)
