"""In-loop noise squashing in a fast cavity.

With the cavity much wider than the mechanical frequency, the feedback
imprints negative Lorentzians on the heterodyne record at both sidebands.
The dips are identical on the two sides while the motional peaks are not.

    python demos/squashing.py
"""
import math

import numpy as np

from optofeedback import analytic, linsolve
from optofeedback.model import FeedbackFilter, NoiseBudget, OpmDevice, ProbeTone, reference_device

ref = reference_device()
dev = OpmDevice(ref.omega_m, ref.gamma, 100 * ref.omega_m, ref.omega_c, ref.g0)
noise = NoiseBudget(205.0, 13.0)
G = math.sqrt(0.1 * dev.kappa * 101 * dev.gamma / 4)
filt = FeedbackFilter(1.0, math.pi / 2)
per_gain = analytic.effective_params_resonant(dev, G, filt).gamma_eff - dev.gamma
filt = filt.with_gain(100 * dev.gamma / per_gain)
probe = ProbeTone(0.0, G)
_, ge, we = linsolve.stability(dev, probe, filt)
floor = noise.amplifier_noise + 0.5

for side, label in ((-1, "lower"), (1, "upper")):
    w = side * we + np.linspace(-10, 10, 801) * ge
    num = linsolve.output_spectrum(linsolve.solve_closed_loop(dev, probe, filt, w), noise,
                                   check_grid=False, convention="symmetrized").values
    sx = linsolve.displacement_spectrum(linsolve.solve_closed_loop(dev, probe, filt, -w), noise,
                                        check_grid=False).values
    closed = analytic.squashed_spectrum_badcavity(w, dev, G, filt.gain, noise, ge, sx)
    print(f"{label} sideband: floor {floor}, minimum {num.min():.3f}, "
          f"excess over floor {np.trapezoid(num - floor, w) / (2 * math.pi):.4g} quanta Hz, "
          f"closed form within {np.max(np.abs(closed / num - 1)):.2%}")
