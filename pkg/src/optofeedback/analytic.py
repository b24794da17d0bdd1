"""Closed-form results for velocity-damping feedback on an optomechanical system.

These are fast evaluation paths for the common operating points (probe on
the cavity, probe on the blue sideband, bad-cavity limit) and serve as
independent oracles for :mod:`optofeedback.linsolve`, which solves the full
closed loop numerically.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import (
    ClassicalOscillator,
    FeedbackChain,
    FeedbackFilter,
    NoiseBudget,
    OpmDevice,
    ParameterError,
)


class UnstableError(RuntimeError):
    """The requested quantity does not exist because the loop is unstable."""


@dataclass(frozen=True)
class EffectiveParams:
    omega_eff: float
    gamma_eff: float

    @property
    def stable(self):
        return self.gamma_eff > 0


@dataclass(frozen=True)
class OccupationBreakdown:
    n_T: float
    n_qba: float
    n_fb: float
    n_m: float
    c_eff: float = float("nan")

    def residual(self):
        """Relative mismatch of ``n_m + 1/2 = n_T + n_qba + n_fb``."""
        total = self.n_T + self.n_qba + self.n_fb
        return abs(self.n_m + 0.5 - total) / total


def classical_spectrum(omega, osc: ClassicalOscillator, omega_m, gamma, fb_gain=0.0):
    """Position spectrum (m^2 s) of a cold-damped classical oscillator.

    ``fb_gain = 0`` is the free oscillator.
    """
    omega = np.asarray(omega, dtype=float)
    kT = osc.boltzmann * osc.temperature
    den = (omega_m**2 - omega**2) ** 2 + (gamma * (1.0 + fb_gain) * omega) ** 2
    return 2.0 * kT * gamma / (osc.mass * den)


def optimal_phase(kappa, omega_m):
    """Feedback phase giving pure damping for a probe on the cavity resonance, in (pi/2, pi)."""
    return math.atan(-kappa / (2.0 * omega_m)) + math.pi


def optimal_phase_blue(kappa, omega_m):
    """Phase maximising the feedback damping with the probe on the blue sideband."""
    return math.atan2(kappa**2 + 8 * omega_m**2, -2 * kappa * omega_m) % (2 * math.pi)


def gamma_fb(G, A0, kappa, omega_m):
    """Feedback-induced damping at the optimal phase, probe on resonance."""
    return 4.0 * G * A0 / math.sqrt(kappa**2 + 4.0 * omega_m**2)


def effective_params_resonant(device: OpmDevice, G, filt: FeedbackFilter) -> EffectiveParams:
    """Shifted frequency and damping of the mechanics for a resonant probe (high-Q limit)."""
    k, wm, phi = device.kappa, device.omega_m, filt.phase
    den = k**2 + 4 * wm**2
    w = wm + 2 * G * filt.gain * (k * math.cos(phi) + 2 * wm * math.sin(phi)) / den
    g = device.gamma + 4 * G * filt.gain * (k * math.sin(phi) - 2 * wm * math.cos(phi)) / den
    return EffectiveParams(w, g)


def occupation_resonant(
    device: OpmDevice, G, filt: FeedbackFilter, noise: NoiseBudget
) -> OccupationBreakdown:
    """Occupation budget (thermal, quantum backaction, injected noise) for a resonant probe.

    The closed forms hold at the optimal phase; elsewhere they are evaluated
    with the off-optimum damping and a warning is issued.
    """
    phi_m = optimal_phase(device.kappa, device.omega_m)
    if filt.gain > 0 and not math.isclose(
        math.remainder(filt.phase - phi_m, 2 * math.pi), 0.0, abs_tol=1e-9
    ):
        warnings.warn(
            "feedback phase differs from the optimum; use linsolve for exact occupations",
            stacklevel=2,
        )
    eff = effective_params_resonant(device, G, filt)
    if not eff.stable:
        raise UnstableError("open-loop unstable occupation undefined")
    k, wm, ge = device.kappa, device.omega_m, eff.gamma_eff
    n_T = device.gamma / ge * (noise.bath_occupation + 0.5)
    c_eff = 4 * G**2 / (k * ge)
    n_qba = c_eff * k**2 / (k**2 + 4 * wm**2)
    n_fb = filt.gain**2 * (noise.amplifier_noise + 0.5) / (2 * k * ge)
    n_m = n_T + n_qba + n_fb - 0.5
    return OccupationBreakdown(n_T, n_qba, n_fb, n_m, c_eff)


def optimal_operating_point(device: OpmDevice, noise: NoiseBudget, G):
    """Gain balancing backaction against injected noise, and the resulting minimum occupation.

    Returns ``(A0_opt, n_m_min)``; ``n_m_min`` neglects the residual thermal term.
    """
    if not G > 0:
        raise ParameterError("coupling G must be positive")
    root = math.sqrt(1 + 2 * noise.amplifier_noise)
    k, wm = device.kappa, device.omega_m
    ratio = 0.25 * root * math.sqrt(k**2 + 4 * wm**2) / k
    return G / ratio, 0.5 * root - 0.5


def gamma_opt_blue(G, kappa, omega_m):
    """Optomechanical anti-damping rate with the probe on the blue sideband."""
    return 4 * G**2 / kappa / (1 + (kappa / (4 * omega_m)) ** 2)


def gamma_fb_blue(G, A0, kappa, omega_m):
    """Feedback damping on the blue sideband at the optimal phase."""
    k, wm = kappa, omega_m
    return 4 * A0 * G * math.sqrt(k**4 + 20 * k**2 * wm**2 + 64 * wm**4) / (k**3 + 16 * k * wm**2)


def blue_sideband_rates(device: OpmDevice, G, filt: FeedbackFilter):
    """``(gamma_opt, gamma_eff)`` for a probe at detuning +omega_m."""
    k, wm, phi = device.kappa, device.omega_m, filt.phase
    g_opt = gamma_opt_blue(G, k, wm)
    fb = (
        4 * G * filt.gain
        * ((k**2 + 8 * wm**2) * math.sin(phi) - 2 * k * wm * math.cos(phi))
        / (k**3 + 16 * k * wm**2)
    )
    return g_opt, device.gamma - g_opt + fb


def critical_gain_blue(device: OpmDevice, G):
    """Smallest optimal-phase gain for which the blue-sideband loop is stable."""
    g_opt = gamma_opt_blue(G, device.kappa, device.omega_m)
    if g_opt <= device.gamma:
        return 0.0
    per_gain = gamma_fb_blue(G, 1.0, device.kappa, device.omega_m)
    return (g_opt - device.gamma) / per_gain


def displacement_spectrum_resonant(omega, device: OpmDevice, G, filt: FeedbackFilter,
                                   noise: NoiseBudget, symmetrized=False):
    """Closed-loop position spectrum for a resonant probe, built from the exact
    Delta = 0 susceptibility (no 4x4 solve).

    Spectral densities obey ``<x^2> = int S_x domega / 2pi`` over the real line.
    The unsymmetrized form carries the quantum sideband weights
    (``n+1`` at +omega_m, ``n`` at -omega_m).
    """
    w = np.asarray(omega, dtype=float)
    k, wm, g = device.kappa, device.omega_m, device.gamma
    chi_c = 1.0 / (k / 2 - 1j * w)
    A = filt.response(w, wm)
    chi = 1.0 / (wm**2 - w**2 - 1j * g * w + 2 * wm * G * A * chi_c)
    # responses of x to x_in, y_in, y_add and f_th
    r_bax = -2 * G * wm * math.sqrt(k) * chi_c * chi
    r_inj = wm * A / math.sqrt(k) * (k * chi_c - 1) * chi
    r_add = wm * A / math.sqrt(k) * chi
    n_c = noise.cavity_occupation
    if symmetrized:
        s_th = 2 * g * wm**2 * (noise.bath_occupation + 0.5)
        cross = 0.0
    else:
        s_th = 2 * g * wm**2 * (noise.bath_occupation + 0.5 + 0.5 * np.sign(w))
        cross = -np.imag(r_bax * np.conj(r_inj))
    out = (
        np.abs(chi) ** 2 * s_th
        + (np.abs(r_bax) ** 2 + np.abs(r_inj) ** 2) * (0.5 + n_c)
        + cross
        + np.abs(r_add) ** 2 * noise.amplifier_noise
    )
    return out


def squashing_lorentzians(omega, device: OpmDevice, G, A0, noise: NoiseBudget, gamma_eff):
    """Negative Lorentzians ``(S_minus, S_plus)`` of in-loop noise squashing, bad-cavity limit."""
    w = np.asarray(omega, dtype=float)
    depth = G * A0 * gamma_eff / device.kappa * (noise.amplifier_noise + 0.5)
    hw2 = (gamma_eff / 2) ** 2
    s_minus = -depth / ((w + device.omega_m) ** 2 + hw2)
    s_plus = -depth / ((w - device.omega_m) ** 2 + hw2)
    return s_minus, s_plus


def squashed_spectrum_badcavity(omega, device: OpmDevice, G, A0, noise: NoiseBudget,
                                gamma_eff, s_x, components=False):
    """In-loop heterodyne spectrum (quanta) in the bad-cavity limit at the optimal phase.

    ``s_x`` is the position spectrum, either an array aligned with ``omega``
    already expressed in the heterodyne frame or a callable of angular
    frequency. In the heterodyne frame the upper (anti-Stokes) sideband sits at
    +omega_m, which samples the position spectrum at -omega; a callable is
    therefore evaluated at ``-omega``.
    """
    w = np.asarray(omega, dtype=float)
    if device.kappa < 10 * device.omega_m:
        warnings.warn("bad-cavity closed form used with kappa < 10 omega_m", stacklevel=2)
    sx = s_x(-w) if callable(s_x) else np.asarray(s_x, dtype=float)
    s_out_x = 8 * G**2 / device.kappa * sx
    s_minus, s_plus = squashing_lorentzians(w, device, G, A0, noise, gamma_eff)
    floor = noise.amplifier_noise + 0.5
    total = s_out_x + s_minus + s_plus + floor
    if components:
        return total, {"x": s_out_x, "minus": s_minus, "plus": s_plus, "floor": floor}
    return total


@dataclass(frozen=True)
class ChainReduction:
    gain: float
    phase: float
    interference: float
    phi0: float
    phi1: float
    phi_plus: float
    phi_minus: float
    amp_plus: float
    amp_minus: float
    force_phase_plus: float
    force_phase_minus: float

    @property
    def phase_difference(self):
        """Phase between the two force contributions, wrapped to (-pi, pi]."""
        return math.remainder(self.force_phase_plus - self.force_phase_minus, 2 * math.pi)

    @property
    def amplitude_ratio(self):
        return self.amp_plus / self.amp_minus

    def as_filter(self):
        return FeedbackFilter(self.gain, self.phase % (2 * math.pi))


def feedback_chain_reduce(device: OpmDevice, chain: FeedbackChain, gamma_eff=None) -> ChainReduction:
    """Reduce the phase-modulated feedback tone to an equivalent filter gain and phase.

    Each modulation sideband beats with the carrier to give a force term with
    its own cavity phase; the two terms add with interference factor ``D``.
    """
    chain.check(device)
    k, wm, df = device.kappa, device.omega_m, chain.detuning_f
    phi0 = math.atan2(2 * wm, k)
    phi1 = math.atan2(2 * df, k)
    phi_p = math.atan2(2 * (df + wm), k)
    phi_m = math.atan2(2 * (df - wm), k)
    amp_p = k / math.sqrt(k**2 / 4 + (df + wm) ** 2)
    amp_m = k / math.sqrt(k**2 / 4 + (df - wm) ** 2)
    phi_tau = wm * chain.loop_delay
    if gamma_eff is not None and chain.loop_delay * gamma_eff > 0.1:
        warnings.warn("loop delay not small compared with the damping time", stacklevel=2)
    line_p, line_m = chain.extra_line_phase
    vp = phi_tau + phi_p - phi1 - math.pi / 2 + line_p
    vm = phi_tau - phi_m + phi1 + math.pi / 2 + line_m
    d2 = amp_p**2 + amp_m**2 + 2 * amp_p * amp_m * math.cos(vp - vm)
    d = math.sqrt(max(d2, 0.0))
    if d <= 1e-12 * (amp_p + amp_m):
        raise ParameterError("feedback force vanishes")
    phase = phi0 + math.atan2(
        amp_p * math.sin(vp) + amp_m * math.sin(vm),
        amp_p * math.cos(vp) + amp_m * math.cos(vm),
    )
    gain = (
        device.g0 * math.sqrt(k) * chain.carrier_amplitude**2 * chain.electronic_gain * d
        / math.sqrt(k**2 / 4 + df**2)
    )
    return ChainReduction(gain, phase, d, phi0, phi1, phi_p, phi_m, amp_p, amp_m, vp, vm)


def sideband_cavity_phase(device: OpmDevice, detuning_f):
    """Cavity-susceptibility phase imprinted on the feedback sidebands, weighted by amplitude."""
    k, wm = device.kappa, device.omega_m
    z = 0j
    for s in (+1, -1):
        det = detuning_f + s * wm
        z += k / math.sqrt(k**2 / 4 + det**2) * np.exp(1j * math.atan2(2 * det, k))
    return float(np.angle(z))
