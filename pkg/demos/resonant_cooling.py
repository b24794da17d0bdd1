"""Feedback cooling with a resonant probe on the reference device.

Walks the filter gain up at the optimal loop phase and prints how the
occupation splits into thermal, backaction and injected-noise parts. The
minimum sits where backaction and injected noise balance.

    python demos/resonant_cooling.py
"""
import math

import numpy as np

from optofeedback import analytic, linsolve
from optofeedback.model import FeedbackFilter, NoiseBudget, ProbeTone, hz, reference_device, to_hz

dev = reference_device()
G = hz(427e3)
phi = analytic.optimal_phase(dev.kappa, dev.omega_m)
noise = NoiseBudget(205.0, 13.0)
probe = ProbeTone(0.0, G)

print(f"optimal loop phase: {math.degrees(phi):.2f} deg")
a_opt, n_floor = analytic.optimal_operating_point(dev, noise, G)
print(f"balance point A0/2pi = {to_hz(a_opt) / 1e3:.1f} kHz, "
      f"occupation floor without thermal residue {n_floor:.3f}\n")

print(f"{'A0/2pi kHz':>11} {'gamma_eff/2pi Hz':>17} {'n_T':>9} {'n_qba':>9} {'n_fb':>8} {'n_m':>8}")
for a0 in np.array([0.0, 10, 28, 76, 125, 206, 400]) * 1e3:
    filt = FeedbackFilter(hz(a0), phi)
    _, ge, _ = linsolve.stability(dev, probe, filt)
    b = linsolve.occupation_breakdown(linsolve.solve(dev, probe, filt), noise)
    print(f"{a0 / 1e3:11.0f} {to_hz(ge):17.1f} {b.n_T:9.3f} {b.n_qba:9.3f} {b.n_fb:8.3f} {b.n_m:8.3f}")

# the thermal residue keeps the sweep minimum above the floor at this coupling
best = min((linsolve.occupation_breakdown(linsolve.solve(dev, probe, FeedbackFilter(hz(a), phi)),
                                          noise).n_m, a) for a in np.linspace(100e3, 320e3, 23))
print(f"\nsweep minimum n_m = {best[0]:.3f} near A0/2pi = {best[1] / 1e3:.0f} kHz")
