"""INI configuration for the command-line tools.

Frequencies and rates in configuration files are ordinary frequencies in Hz,
phases are in degrees. Everything is converted to rad/s on load.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .model import (FeedbackChain, FeedbackFilter, NoiseBudget, OpmDevice, ParameterError,
                    ProbeTone, hz, validate_device)

BUILTIN = {"paper-defaults": "paper-defaults.ini"}

# section -> {key: required}
SCHEMA = {
    "device": {"omega_m": True, "gamma": True, "kappa": True, "omega_c": True, "g0": True},
    "probe": {"detuning": True, "coupling": False, "photon_number": False},
    "feedback": {"gain": True, "phase": True},
    "noise": {"bath_occupation": True, "amplifier_noise": False, "cavity_occupation": False,
              "bath_profile": False},
    "grid": {"halfspan": False, "per_linewidth": False},
    "chain": {"detuning_f": True, "carrier_amplitude": False, "electronic_gain": False,
              "loop_delay": False},
    "sweep": {"variable": True, "start": True, "stop": True, "steps": True, "outputs": False},
    "map": {"phase_start": True, "phase_stop": True, "phase_steps": True,
            "gain_start": True, "gain_stop": True, "gain_steps": True},
    "calibration": {"power_file": False, "gain_file": False, "probe": False, "coupling": False,
                    "p_coeff": False},
    "oracle": {"dt": False, "duration": False, "linewidths": False, "tolerance": False,
               "segment_linewidths": False, "correlator_scale": False,
               "save_series": False},
}
REQUIRED_SECTIONS = ("device", "probe", "feedback", "noise")
SWEEP_VARIABLES = ("phase", "gain", "detuning", "power", "feedback_detuning")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    start: float
    stop: float
    steps: int
    outputs: tuple = ()

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep variable must be one of {', '.join(SWEEP_VARIABLES)}")
        if self.steps < 2 and self.start != self.stop:
            raise ConfigError("sweep needs steps >= 2")
        if not (math.isfinite(self.start) and math.isfinite(self.stop)):
            raise ConfigError("sweep range must be finite")

    def values(self):
        """Sweep points in user units; a zero-width range gives one point."""
        if self.start == self.stop:
            return np.array([self.start])
        return np.linspace(self.start, self.stop, self.steps)


@dataclass
class Config:
    device: OpmDevice
    probe: ProbeTone
    gains: tuple  # rad/s, one or more filter gains
    phase: float  # rad
    noise: NoiseBudget
    bath_profile: tuple | None = None  # ((A0 rad/s, ...), (n_T, ...))
    grid: dict = field(default_factory=dict)
    chain: FeedbackChain | None = None
    sweep: SweepSpec | None = None
    stability_map: dict | None = None
    calibration: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    source: str = ""
    text: str = ""

    @property
    def filter(self):
        return FeedbackFilter(self.gains[0], self.phase)

    def noise_at(self, gain):
        """Noise budget with the bath occupation taken from the heating profile, if any."""
        if self.bath_profile is None:
            return self.noise
        knots, occ = self.bath_profile
        return self.noise.with_bath(float(np.interp(gain, knots, occ)))

    def resolved(self):
        """Flat ``key = value`` description of every resolved setting (SI, rad/s)."""
        d = self.device
        out = {
            "source": self.source,
            "device.omega_m": d.omega_m, "device.gamma": d.gamma, "device.kappa": d.kappa,
            "device.omega_c": d.omega_c, "device.g0": d.g0,
            "probe.detuning": self.probe.detuning, "probe.coupling": self.probe.coupling,
            "feedback.gains": " ".join(f"{g:.12g}" for g in self.gains),
            "feedback.phase": self.phase,
            "noise.bath_occupation": self.noise.bath_occupation,
            "noise.amplifier_noise": self.noise.amplifier_noise,
            "noise.cavity_occupation": self.noise.cavity_occupation,
        }
        if self.bath_profile is not None:
            out["noise.bath_profile"] = " ".join(
                f"{a:.12g}:{n:.12g}" for a, n in zip(*self.bath_profile))
        return {k: (f"{v:.12g}" if isinstance(v, float) else str(v)) for k, v in out.items()}


def _line_index(text):
    """Map (section, key) and section names to 1-based line numbers."""
    where = {}
    section = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where.setdefault(section, i)
            continue
        if section is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), i)
    return where


def read_text(path):
    """Config text for a path or the name of a built-in config."""
    name = str(path)
    if name in BUILTIN:
        return resources.files("optofeedback.data").joinpath(BUILTIN[name]).read_text(), name
    p = Path(name)
    if not p.is_file():
        raise ConfigError(f"config file {name} not found")
    return p.read_text(), str(p)


def load(path) -> Config:
    text, source = read_text(path)
    return parse(text, source)


def parse(text, source="<string>") -> Config:
    where = _line_index(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    def loc(section, key=None):
        line = where.get((section, key)) if key else where.get(section)
        return f"{source}:{line}" if line else source

    problems = []
    for sec in cp.sections():
        if sec not in SCHEMA:
            problems.append(f"{loc(sec)}: unknown section [{sec}]")
            continue
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                problems.append(f"{loc(sec, key)}: unknown key '{key}' in [{sec}]")
        for key, required in SCHEMA[sec].items():
            if required and key not in cp[sec]:
                problems.append(f"{loc(sec)}: missing key '{key}' in [{sec}]")
    for sec in REQUIRED_SECTIONS:
        if sec not in cp:
            problems.append(f"{source}: missing section [{sec}]")
    if problems:
        raise ConfigError("\n".join(problems))

    def num(sec, key, default=None):
        if key not in cp[sec]:
            return default
        raw = cp[sec][key]
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{loc(sec, key)}: '{key}' must be a number, got {raw!r}") from None

    def numlist(sec, key):
        raw = cp[sec][key]
        try:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"{loc(sec, key)}: '{key}' must be a list of numbers") from None

    device = OpmDevice(*(hz(num("device", k)) for k in ("omega_m", "gamma", "kappa", "omega_c", "g0")))
    try:
        validate_device(device)
    except ParameterError as exc:
        raise ConfigError(f"{loc('device')}: {exc}") from None

    detuning = hz(num("probe", "detuning"))
    coupling = num("probe", "coupling")
    n_c = num("probe", "photon_number")
    try:
        if coupling is not None:
            probe = ProbeTone(detuning, hz(coupling), n_c)
            probe.check(device)
        elif n_c is not None:
            probe = ProbeTone.from_photons(device, detuning, n_c)
        else:
            raise ConfigError(f"{loc('probe')}: give 'coupling' or 'photon_number'")
    except ParameterError as exc:
        raise ConfigError(f"{loc('probe')}: {exc}") from None

    gains = tuple(hz(g) for g in numlist("feedback", "gain"))
    if not gains or any(g < 0 for g in gains):
        raise ConfigError(f"{loc('feedback', 'gain')}: gains must be non-negative")
    phase = math.radians(num("feedback", "phase"))

    try:
        noise = NoiseBudget(num("noise", "bath_occupation"), num("noise", "amplifier_noise", 0.0),
                            num("noise", "cavity_occupation", 0.0))
    except ParameterError as exc:
        raise ConfigError(f"{loc('noise')}: {exc}") from None
    profile = None
    if "bath_profile" in cp["noise"]:
        try:
            pairs = [tuple(float(x) for x in item.split(":"))
                     for item in cp["noise"]["bath_profile"].replace(",", " ").split()]
            knots, occ = zip(*pairs)
        except ValueError:
            raise ConfigError(
                f"{loc('noise', 'bath_profile')}: expected 'gain_hz:occupation' pairs") from None
        if any(np.diff(knots) <= 0):
            raise ConfigError(f"{loc('noise', 'bath_profile')}: gains must increase")
        profile = (tuple(hz(k) for k in knots), tuple(occ))

    cfg = Config(device, probe, gains, phase, noise, profile, source=source, text=text)
    if "grid" in cp:
        cfg.grid = {k: num("grid", k) for k in cp["grid"]}
        if "per_linewidth" in cfg.grid:
            cfg.grid["per_linewidth"] = int(cfg.grid["per_linewidth"])
    if "chain" in cp:
        cfg.chain = FeedbackChain(
            hz(num("chain", "detuning_f")),
            num("chain", "carrier_amplitude", 1.0),
            num("chain", "electronic_gain", 1.0),
            num("chain", "loop_delay", 0.0),
        )
    if "sweep" in cp:
        sw = cp["sweep"]
        steps = num("sweep", "steps")
        if steps != int(steps):
            raise ConfigError(f"{loc('sweep', 'steps')}: steps must be an integer")
        try:
            cfg.sweep = SweepSpec(sw["variable"].strip(), num("sweep", "start"), num("sweep", "stop"),
                                  int(steps), tuple(sw.get("outputs", "").replace(",", " ").split()))
        except ConfigError as exc:
            raise ConfigError(f"{loc('sweep')}: {exc}") from None
    if "map" in cp:
        m = {k: num("map", k) for k in cp["map"]}
        for k in ("phase_steps", "gain_steps"):
            if m[k] < 2 or m[k] != int(m[k]):
                raise ConfigError(f"{loc('map', k)}: {k} must be an integer >= 2")
            m[k] = int(m[k])
        cfg.stability_map = m
    if "calibration" in cp:
        cal = dict(cp["calibration"])
        base = Path(source).parent if source not in BUILTIN else Path(".")
        for k in ("power_file", "gain_file"):
            if k in cal:
                cal[k] = str((base / cal[k]).resolve()) if not Path(cal[k]).is_absolute() else cal[k]
        for k in ("coupling", "p_coeff"):
            if k in cal:
                cal[k] = num("calibration", k)
        cal.setdefault("probe", "resonant")
        if cal["probe"] not in ("resonant", "blue"):
            raise ConfigError(f"{loc('calibration', 'probe')}: probe must be 'resonant' or 'blue'")
        cfg.calibration = cal
    if "oracle" in cp:
        cfg.oracle = {k: num("oracle", k) for k in cp["oracle"]}
    return cfg
