"""Stabilizing a blue-detuned probe with feedback.

A probe one mechanical frequency above the cavity anti-damps the resonator.
Feedback at the matching phase restores stability above a critical gain; the
bath heats with gain, so the occupation has a minimum.

    python demos/blue_sideband.py
"""
import numpy as np

from optofeedback import analytic, config, linsolve
from optofeedback.model import FeedbackFilter, ProbeTone, hz, reference_device, to_hz

dev = reference_device()
G = hz(104e3)
probe = ProbeTone(dev.omega_m, G)
phi = analytic.optimal_phase_blue(dev.kappa, dev.omega_m)
g_opt = analytic.gamma_opt_blue(G, dev.kappa, dev.omega_m)
crit = analytic.critical_gain_blue(dev, G)
print(f"anti-damping gamma_opt/2pi = {to_hz(g_opt):.0f} Hz against gamma/2pi = {to_hz(dev.gamma):.0f} Hz")
print(f"critical filter gain A0/2pi = {to_hz(crit) / 1e3:.1f} kHz")
edge = linsolve.find_stability_boundary(dev, probe, phi, (0.5 * crit, 2 * crit))
print(f"bisected stability edge     = {to_hz(edge) / 1e3:.1f} kHz\n")

cfg = config.load("configs/blue-gain-sweep.ini")
print(f"{'A0/2pi kHz':>11} {'stable':>7} {'gamma_eff/2pi Hz':>17} {'n_T':>7} {'n_m':>8}")
for a0 in np.arange(150e3, 401e3, 25e3):
    filt = FeedbackFilter(hz(a0), phi)
    stable, ge, _ = linsolve.stability(dev, probe, filt)
    noise = cfg.noise_at(hz(a0))
    n_m = float("nan")
    if stable:
        n_m = linsolve.occupation_breakdown(linsolve.solve(dev, probe, filt), noise).n_m
    print(f"{a0 / 1e3:11.0f} {str(stable):>7} {to_hz(ge):17.1f} {noise.bath_occupation:7.0f} {n_m:8.1f}")
