"""Device, drive and noise parameters for a single-mode electromechanical system.

All rates and frequencies are stored as angular frequencies (rad/s). Values
entering or leaving the package through configuration files and CSV tables
are ordinary frequencies in Hz; use :func:`hz` and :func:`to_hz` at that
boundary only.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi
K_BOLTZMANN = 1.380649e-23  # J/K
HBAR = 1.054571817e-34  # J s


class ParameterError(ValueError):
    """Raised when a parameter set violates a physical invariant."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def hz(f):
    """Ordinary frequency (Hz) to angular frequency (rad/s)."""
    return TWO_PI * np.asarray(f, dtype=float) if np.ndim(f) else TWO_PI * float(f)


def to_hz(w):
    """Angular frequency (rad/s) to ordinary frequency (Hz)."""
    return np.asarray(w, dtype=float) / TWO_PI if np.ndim(w) else float(w) / TWO_PI


@dataclass(frozen=True)
class OpmDevice:
    """Static optomechanical device parameters, all in rad/s."""

    omega_m: float
    gamma: float
    kappa: float
    omega_c: float
    g0: float

    def problems(self):
        out = []
        for name in ("omega_m", "gamma", "kappa", "omega_c", "g0"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                out.append(f"{name} must be positive")
        if self.gamma > 0 and self.omega_m > 0 and not self.gamma < self.omega_m / 10:
            out.append("gamma < omega_m/10 violated")
        return out

    @property
    def quality_factor(self):
        return self.omega_m / self.gamma


def validate_device(device: OpmDevice) -> OpmDevice:
    """Return ``device`` unchanged, or raise :class:`ParameterError` listing every violation."""
    problems = device.problems()
    if problems:
        raise ParameterError(problems)
    return device


def effective_coupling(g0, n_c):
    """Drive-enhanced coupling ``G = g0 * sqrt(n_c)``."""
    if np.any(np.asarray(n_c) < 0):
        raise ParameterError("photon number must be non-negative")
    return g0 * np.sqrt(n_c)


def photon_number(g0, G):
    """Intracavity photon number giving coupling ``G``."""
    return (G / g0) ** 2


@dataclass(frozen=True)
class ProbeTone:
    """Measurement tone: detuning from the cavity and the effective coupling it induces."""

    detuning: float
    coupling: float
    photon_number: Optional[float] = None

    def __post_init__(self):
        if not self.coupling >= 0:
            raise ParameterError("coupling G must be non-negative")

    @classmethod
    def from_photons(cls, device: OpmDevice, detuning, n_c):
        return cls(detuning, float(effective_coupling(device.g0, n_c)), float(n_c))

    def check(self, device: OpmDevice):
        if self.photon_number is None:
            return
        expected = effective_coupling(device.g0, self.photon_number)
        if not math.isclose(expected, self.coupling, rel_tol=1e-12, abs_tol=0.0):
            raise ParameterError("coupling inconsistent with photon number")

    def probe_frequency(self, device: OpmDevice):
        return device.omega_c + self.detuning


@dataclass(frozen=True)
class FeedbackFilter:
    """Phase-shift-and-gain filter ``A[w] = A0 exp(-i phi w / omega_m)``."""

    gain: float
    phase: float

    def __post_init__(self):
        if not self.gain >= 0:
            raise ParameterError("feedback gain A0 must be non-negative")

    @property
    def phase_deg(self):
        """Phase reported in degrees in [0, 360)."""
        return math.degrees(self.phase) % 360.0

    def response(self, omega, omega_m):
        return self.gain * np.exp(-1j * self.phase * np.asarray(omega) / omega_m)

    def with_gain(self, gain):
        return replace(self, gain=gain)

    def with_phase(self, phase):
        return replace(self, phase=phase)


OPEN_LOOP = FeedbackFilter(0.0, 0.0)


@dataclass(frozen=True)
class FeedbackChain:
    """Hardware description of the feedback path (phase-modulated feedback tone)."""

    detuning_f: float
    carrier_amplitude: float
    electronic_gain: float
    loop_delay: float = 0.0
    extra_line_phase: tuple = (0.0, 0.0)

    def check(self, device: OpmDevice):
        if not abs(self.detuning_f) > 2 * device.omega_m:
            warnings.warn(
                "|detuning_f| <= 2 omega_m: feedback-tone sidebands overlap the probe sidebands",
                stacklevel=2,
            )


@dataclass(frozen=True)
class NoiseBudget:
    """Occupations of the mechanical bath, detection chain and cavity input (quanta)."""

    bath_occupation: float
    amplifier_noise: float = 0.0
    cavity_occupation: float = 0.0

    def __post_init__(self):
        for name in ("bath_occupation", "amplifier_noise", "cavity_occupation"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be non-negative")

    def with_bath(self, n):
        return replace(self, bath_occupation=n)


@dataclass(frozen=True)
class ClassicalOscillator:
    mass: float
    temperature: float
    position_scale: float
    boltzmann: float = field(default=K_BOLTZMANN)

    def __post_init__(self):
        if not (self.mass > 0 and self.temperature > 0 and self.position_scale > 0):
            raise ParameterError("mass, temperature and position_scale must be positive")


def reference_device() -> OpmDevice:
    """Aluminium drum device used for the reference measurements."""
    return OpmDevice(
        omega_m=hz(8.14e6),
        gamma=hz(76.0),
        kappa=hz(8.5e6),
        omega_c=hz(5.35e9),
        g0=hz(130.0),
    )


def reference_noise(bath=205.0) -> NoiseBudget:
    return NoiseBudget(bath_occupation=bath, amplifier_noise=13.0)


def thermal_occupation(omega, temperature):
    """Bose occupation of a mode at angular frequency ``omega``."""
    return 1.0 / np.expm1(HBAR * omega / (K_BOLTZMANN * temperature))
