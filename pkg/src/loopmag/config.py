"""Strict JSON scenario configuration.

Every physical quantity carries its unit in the key name.  Unknown keys
are errors; missing keys take the defaults below, which reproduce the
nominal step-field experiment (50 mG applied at 0.5 ms, feedback from
1 ms).
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

from .errors import ConfigError
from .loopshape import Convention
from .physim import (
    BETA,
    GAMMA_CS,
    N_NOMINAL,
    NOISE_PSD,
    PLANT_ZERO,
    SUPPLY_POLE,
    T2,
    ATOMIC_POLE,
    FieldWaveform,
    PhysParams,
)
from .tfcore import RationalTF

DERIVE = "derive-from-physics"

DEFAULTS = {
    "physics": {
        "gamma_rad_per_s_g": GAMMA_CS,
        "t2_ms": T2 * 1e3,
        "pump_rate_per_s": ATOMIC_POLE - 1.0 / T2,
        "meas_gain_v": None,  # None: derived so the nominal plant matches the fitted model
        "noise_psd_v2_per_hz": NOISE_PSD,
        "beta_g_per_v": BETA,
        "n_nominal": N_NOMINAL,
        "n_atoms": None,  # None: n_nominal
        "supply_zero_rad_s": PLANT_ZERO,
        "supply_pole_rad_s": SUPPLY_POLE,
    },
    "plant": DERIVE,
    "controller": {
        "fc_hz": 1e6,
        "convention": Convention.TRACKING_MINUS.value,
    },
    "waveform": {
        "kind": "step",
        "amplitude_g": 0.05,
        "start_ms": 0.5,
        "frequency_hz": 0.0,
        "bandwidth_hz": 0.0,
        "seed": 0,
        "n_components": 100,
        "samples_g": [],
        "sample_dt_s": 0.0,
    },
    "run": {
        "mode": "closed",
        "duration_ms": 5.0,
        "sample_rate_hz": 5e6,
        "feedback_on_at_ms": 1.0,
        "seed": 0,
        "replicates": 1,
        "reference_v": 0.0,
        "assumed_n": None,  # None: n_nominal
        "open_window_us": 1.0,
        "error_window_ms": [1.0, 5.0],
        "refit_numerator": True,
        "u_limit_v": 50.0,
    },
    "sweep": {
        "atom_numbers": [1e6, 1e7, 1e8, 1e9],
        "replicates": 100,
        "n_log_sigma": 0.0,
    },
    "identify": {
        "f_min_hz": 100.0,
        "f_max_hz": 3e5,
        "n_points": 40,
        "drive_amplitude_v": 1e-3,
        "level_corner_hz": 1.6e3,
        "settle_cycles": 10,
        "measure_cycles": 20,
        "reset_between_points": True,
        "n_zeros": 1,
        "n_poles": 2,
    },
    "output": {
        "directory": "out",
        "formats": ["csv", "json"],
    },
}

_NULLABLE = {("physics", "meas_gain_v"), ("physics", "n_atoms"), ("run", "assumed_n")}
_CHOICES = {
    ("controller", "convention"): {c.value for c in Convention},
    ("waveform", "kind"): {"constant", "step", "sinusoid", "bandlimited_noise", "samples"},
    ("run", "mode"): {"closed", "open"},
}
_UNIT_SUFFIXES = ("_ms", "_s", "_us", "_hz", "_g", "_v", "_rad_s", "_per_s", "_v2_per_hz", "_g_per_v", "_rad_per_s_g")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _hint(section: str, key: str) -> str:
    options = [k for k in DEFAULTS[section] if k.startswith(key + "_")]
    if options:
        return f"; physical keys carry a unit suffix, did you mean {options[0]!r}?"
    if not key.endswith(_UNIT_SUFFIXES):
        return "; physical keys carry a unit suffix"
    return ""


def _check_value(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if value is None:
        if (section, key) in _NULLABLE:
            return None
        raise ConfigError(f"{where} must not be null")
    if (section, key) in _CHOICES:
        if value not in _CHOICES[(section, key)]:
            raise ConfigError(f"{where} must be one of {sorted(_CHOICES[(section, key)])}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float) or (default is None and (section, key) in _NULLABLE):
        if not _is_number(value):
            raise ConfigError(f"{where} must be a finite number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        if key == "formats":
            bad = [v for v in value if v not in ("csv", "json")]
            if bad:
                raise ConfigError(f"{where} has unknown formats {bad}")
            return list(value)
        if not all(_is_number(v) for v in value):
            raise ConfigError(f"{where} must contain finite numbers")
        return [float(v) for v in value]
    raise ConfigError(f"{where} has an unsupported type")


def _check_plant(value):
    if value == DERIVE:
        return DERIVE
    if not isinstance(value, dict) or set(value) != {"num", "den"}:
        raise ConfigError(f"plant must be {DERIVE!r} or an object with exactly 'num' and 'den' lists")
    for k in ("num", "den"):
        if not isinstance(value[k], list) or not value[k] or not all(_is_number(v) for v in value[k]):
            raise ConfigError(f"plant.{k} must be a non-empty list of numbers (ascending powers of s)")
    return {"num": [float(v) for v in value["num"]], "den": [float(v) for v in value["den"]]}


def parse_config(doc) -> dict:
    """Validate a decoded document and merge it over the defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in doc.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section {section!r}")
        if section == "plant":
            cfg["plant"] = _check_plant(body)
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}{_hint(section, key)}")
            cfg[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: dict) -> None:
    run = cfg["run"]
    if not run["duration_ms"] > 0:
        raise ConfigError("run.duration_ms must be positive")
    if not run["sample_rate_hz"] > 0:
        raise ConfigError("run.sample_rate_hz must be positive")
    if run["replicates"] < 1:
        raise ConfigError("run.replicates must be at least 1")
    if run["seed"] < 0:
        raise ConfigError("run.seed must be non-negative")
    if len(run["error_window_ms"]) != 2 or not run["error_window_ms"][0] < run["error_window_ms"][1]:
        raise ConfigError("run.error_window_ms must be [start, end] with start < end")
    if not cfg["sweep"]["atom_numbers"]:
        raise ConfigError("sweep.atom_numbers must not be empty")
    if any(not n > 0 for n in cfg["sweep"]["atom_numbers"]):
        raise ConfigError("sweep.atom_numbers must be positive")
    if cfg["sweep"]["replicates"] < 1:
        raise ConfigError("sweep.replicates must be at least 1")
    if not cfg["controller"]["fc_hz"] > 0:
        raise ConfigError("controller.fc_hz must be positive")
    ident = cfg["identify"]
    if not 0 < ident["f_min_hz"] < ident["f_max_hz"]:
        raise ConfigError("identify needs 0 < f_min_hz < f_max_hz")
    if ident["n_points"] < 2:
        raise ConfigError("identify.n_points must be at least 2")


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# builders -----------------------------------------------------------------------


def build_params(cfg: dict) -> PhysParams:
    ph = cfg["physics"]
    kwargs = dict(
        gamma=ph["gamma_rad_per_s_g"],
        t2=ph["t2_ms"] * 1e-3,
        pump_rate=ph["pump_rate_per_s"],
        noise_psd=ph["noise_psd_v2_per_hz"],
        beta=ph["beta_g_per_v"],
        n_nominal=ph["n_nominal"],
        supply_zero=ph["supply_zero_rad_s"],
        supply_pole=ph["supply_pole_rad_s"],
    )
    if ph["meas_gain_v"] is not None:
        kwargs["meas_gain"] = ph["meas_gain_v"]
    try:
        return PhysParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"physics: {exc}") from exc


def n_atoms(cfg: dict) -> float:
    ph = cfg["physics"]
    return ph["n_nominal"] if ph["n_atoms"] is None else ph["n_atoms"]


def build_waveform(cfg: dict) -> FieldWaveform:
    wf = cfg["waveform"]
    try:
        return FieldWaveform(
            kind=wf["kind"],
            amplitude=wf["amplitude_g"],
            start=wf["start_ms"] * 1e-3,
            frequency=wf["frequency_hz"],
            bandwidth=wf["bandwidth_hz"],
            seed=wf["seed"],
            n_components=wf["n_components"],
            samples=tuple(wf["samples_g"]),
            sample_dt=wf["sample_dt_s"],
        )
    except ValueError as exc:
        raise ConfigError(f"waveform: {exc}") from exc


def build_plant(cfg: dict, params: PhysParams) -> RationalTF:
    from .physim import effective_plant

    if cfg["plant"] == DERIVE:
        return effective_plant(params, params.n_nominal)
    try:
        return RationalTF(tuple(cfg["plant"]["num"]), tuple(cfg["plant"]["den"]))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"plant: {exc}") from exc
