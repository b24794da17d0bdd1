"""Peak fitting, linear calibrations and bath-occupation inference."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize

from .analytic import gamma_fb_blue, gamma_opt_blue
from .linsolve import Spectrum, output_spectrum, solve_closed_loop
from .model import FeedbackFilter, NoiseBudget, OpmDevice, ProbeTone


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class LorentzianFit:
    """Lorentzian on a flat baseline.

    ``area`` is in quanta, i.e. the integral above the baseline over
    ``d omega / 2 pi``; ``baseline`` is a spectral density (quanta per Hz).
    """

    center: float
    fwhm: float
    area: float
    baseline: float
    goodness: float
    errors: dict = field(default_factory=dict)
    dip_depth: float = 0.0
    distorted: bool = False

    def __call__(self, omega):
        return lorentzian(omega, self.center, self.fwhm, self.area, self.baseline)


def lorentzian(omega, center, fwhm, area, baseline):
    h = 0.5 * fwhm
    return baseline + area * fwhm / ((np.asarray(omega) - center) ** 2 + h * h)


DIP_LIMIT = 0.05  # squashing dips deeper than this fraction of the peak mark a fit as distorted


def fit_lorentzian(spec: Spectrum, window=None, dip=False, method="lsq") -> LorentzianFit:
    """Least-squares Lorentzian fit inside ``window = (lo, hi)`` (rad/s).

    ``dip=True`` fits a negative Lorentzian (a squashing dip); its area comes
    out negative. ``goodness`` is the residual norm relative to the peak
    signal norm. ``distorted`` is set when the data fall below the wing level
    by more than 5% of the peak height, the signature of noise squashing
    under the peak.

    ``method="whittle"`` refines the least-squares result by maximizing the
    Whittle likelihood ``-sum(y/m + log m)``, the efficient estimator for
    averaged periodograms whose scatter is proportional to the spectrum.
    """
    s = spec.window(*window) if window is not None else spec
    w = np.asarray(s.omega, dtype=float)
    y = np.asarray(s.values, dtype=float)
    if w.size < 5:
        raise FitError("window holds fewer than 5 points")
    sign = -1.0 if dip else 1.0
    edge = max(1, w.size // 10)
    wing = float(np.median(np.concatenate([y[:edge], y[-edge:]])))
    yy = sign * (y - wing)
    # starting values from a lightly smoothed copy, so single noisy bins do not seed the fit
    ys = ndimage.uniform_filter1d(yy, max(1, w.size // 100) | 1, mode="nearest")
    i0 = int(np.argmax(ys))
    height = ys[i0]
    if not height > 0:
        raise FitError("no peak above the wing level in window")
    above = np.nonzero(ys >= 0.5 * height)[0]
    step = float(np.median(np.diff(w)))
    fw0 = max(w[above[-1]] - w[above[0]], step)
    c0 = w[i0]

    # scaled variables: u = (w - c0)/fw0, data in units of the peak height
    u = (w - c0) / fw0
    v = yy / height

    def model(u, c, f, a, b):
        return b + a * f / ((u - c) ** 2 + 0.25 * f * f)

    p0 = (0.0, 1.0, 0.25, 0.0)
    try:
        popt, pcov = optimize.curve_fit(
            model, u, v, p0=p0, bounds=([u[0], 1e-9, 0, -np.inf], [u[-1], np.inf, np.inf, np.inf]),
            xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=20000,
        )
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"Lorentzian fit did not converge: {exc}") from None
    if method == "whittle":
        if dip:
            raise ValueError("Whittle fit needs a positive spectrum")
        popt = _whittle_refine(model, u, y / height, popt, wing / height)
    elif method != "lsq":
        raise ValueError(f"unknown fit method {method!r}")
    c, f, a, b = popt
    fwhm = f * fw0
    if fwhm < 3 * step:
        raise FitError(f"peak width {fwhm:.4g} rad/s narrower than 3 grid steps ({step:.4g})")
    perr = np.sqrt(np.clip(np.diag(pcov), 0, None)) if np.all(np.isfinite(pcov)) else np.full(4, np.nan)
    resid = v - model(u, *popt)
    sig = v - b
    goodness = float(np.linalg.norm(resid) / max(np.linalg.norm(sig), 1e-300))
    # the scaled profile integrates to 2 pi a over u, so a is already per d omega / 2 pi
    area = sign * a * height * fw0
    baseline = wing + sign * b * height
    errors = {
        "center": perr[0] * fw0,
        "fwhm": perr[1] * fw0,
        "area": perr[2] * height * fw0,
        "baseline": perr[3] * height,
    }
    depth = 0.0
    if not dip:
        peak = float(np.max(y) - wing)
        depth = float(max(0.0, wing - np.min(y)) / peak) if peak > 0 else 0.0
    return LorentzianFit(
        center=float(c * fw0 + c0),
        fwhm=float(fwhm),
        area=float(area),
        baseline=float(baseline),
        goodness=goodness,
        errors=errors,
        dip_depth=depth,
        distorted=bool(depth > DIP_LIMIT),
    )


def _whittle_refine(model, u, y, p0, wing):
    """Maximize the Whittle likelihood; ``y`` is the raw spectrum over the peak
    height and ``wing`` the offset removed before the least-squares pass."""
    c0, f0, a0, b0 = p0

    def unpack(q):
        return q[0], f0 * math.exp(q[1]), a0 * math.exp(q[2]), q[3]

    def nll(q):
        c, f, a, b = unpack(q)
        m = model(u, c, f, a, b) + wing
        if np.any(m <= 0):
            return np.inf
        return float(np.sum(y / m + np.log(m)))

    start = np.array([c0, 0.0, 0.0, max(b0, -0.5 * wing)])
    res = optimize.minimize(nll, start, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000,
                                     "maxfev": 40000})
    if not np.isfinite(res.fun):
        raise FitError("Whittle refinement failed")
    return np.array(unpack(res.x))


# -- calibrations --------------------------------------------------------


@dataclass(frozen=True)
class CalibrationModel:
    """Coefficients relating generator power and loop gain to rates (rad/s)."""

    P_coeff: float | None = None
    L_coeff: float | None = None
    G_rsb: float | None = None
    gain_symbol: str = "g"
    probe: str = "resonant"
    coupling: float | None = None
    kappa: float | None = None
    omega_m: float | None = None

    def electronic_gain_map(self, gain):
        """Filter gain A0 (rad/s) for experimental gain value(s) ``gain``."""
        if self.L_coeff is None or self.coupling is None:
            raise FitError("gain calibration missing")
        k, wm, G = self.kappa, self.omega_m, self.coupling
        g = np.asarray(gain, dtype=float)
        if self.probe == "blue":
            per_a0 = gamma_fb_blue(G, 1.0, k, wm)
            return self.L_coeff * g / per_a0
        return self.L_coeff * g * math.sqrt(k**2 + 4 * wm**2) / (4 * G)


def coupling_from_damping(gamma_opt, kappa, omega_m):
    """Red-sideband coupling inferred from the optomechanical damping."""
    return 0.5 * np.sqrt(np.asarray(gamma_opt) * kappa * (1 + (kappa / (4 * omega_m)) ** 2))


def calibrate_power(powers, gamma_opt, device: OpmDevice):
    """Slope of damping versus generator power through the origin.

    Returns ``(CalibrationModel, G_rsb)`` with ``G_rsb`` evaluated at each
    power.
    """
    P = np.asarray(powers, dtype=float)
    g = np.asarray(gamma_opt, dtype=float)
    if P.size < 3 or P.size != g.size:
        raise FitError("power calibration needs at least 3 paired points")
    slope = float(P @ g / (P @ P))
    if not slope > 0:
        raise FitError(f"non-positive damping slope {slope:.4g}")
    G_rsb = coupling_from_damping(slope * P, device.kappa, device.omega_m)
    return CalibrationModel(P_coeff=slope, kappa=device.kappa, omega_m=device.omega_m), G_rsb


def cavity_susceptibility(detuning, kappa, omega=0.0):
    return 1.0 / (kappa / 2 - 1j * (omega + detuning))


def transfer_coupling(G_rsb, detuning, device: OpmDevice):
    """Coupling at another detuning for the same generator power."""
    k = device.kappa
    ratio = abs(cavity_susceptibility(detuning, k)) / abs(cavity_susceptibility(-device.omega_m, k))
    return ratio * G_rsb


def calibrate_gain(gains, linewidths, G, device: OpmDevice, probe="resonant"):
    """Feedback-damping slope per unit experimental gain.

    Resonant probing fits ``gamma_eff - gamma = L g``; blue-sideband probing
    fits ``gamma_eff - gamma + gamma_opt = L g``. Both lines go through
    ``g = 0``. Only weak-feedback (undistorted) points should be passed.
    """
    g = np.asarray(gains, dtype=float)
    lw = np.asarray(linewidths, dtype=float)
    ok = g > 0
    if ok.sum() < 2 or g.size != lw.size:
        raise FitError("gain calibration needs at least 2 points with nonzero gain")
    offset = device.gamma
    if probe == "blue":
        offset -= gamma_opt_blue(G, device.kappa, device.omega_m)
    elif probe != "resonant":
        raise ValueError(f"unknown probe configuration {probe!r}")
    y = lw[ok] - offset
    L = float(g[ok] @ y / (g[ok] @ g[ok]))
    if not L > 0:
        raise FitError(f"non-positive gain slope {L:.4g}")
    return CalibrationModel(L_coeff=L, probe=probe, coupling=G, kappa=device.kappa,
                            omega_m=device.omega_m)


def critical_gain(cal: CalibrationModel, gamma):
    """Experimental gain at which blue-sideband probing becomes stable."""
    if cal.probe != "blue":
        raise ValueError("critical gain defined for blue-sideband calibrations only")
    return (gamma_opt_blue(cal.coupling, cal.kappa, cal.omega_m) - gamma) / cal.L_coeff


# -- bath occupation -------------------------------------------------------


@dataclass(frozen=True)
class BathFit:
    bath_occupation: float
    error: float
    offset: float
    residual: float


def _spectrum_basis(omega, device, probe, filt, n_add, convention):
    tr = solve_closed_loop(device, probe, filt, omega)
    s0 = output_spectrum(tr, NoiseBudget(0.0, n_add), check_grid=False, convention=convention).values
    s1 = output_spectrum(tr, NoiseBudget(1.0, n_add), check_grid=False, convention=convention).values
    return s0, s1 - s0


def fit_bath_occupation(measured: Spectrum, device: OpmDevice, probe: ProbeTone,
                        filt: FeedbackFilter, n_add, bounds=(0.0, 1e6), fit_offset=False,
                        max_offset=None, convention="quantum") -> BathFit:
    """Bath occupation as the single free parameter of the output-spectrum model.

    The model is linear in the bath occupation, so the fit is a closed-form
    least-squares step. With ``fit_offset`` a frequency offset of the
    measured axis is also optimized (bounded by ``max_offset`` rad/s).
    """
    w = np.asarray(measured.omega, dtype=float)
    y = np.asarray(measured.values, dtype=float)

    def solve_linear(delta):
        s0, s1 = _spectrum_basis(w - delta, device, probe, filt, n_add, convention)
        denom = s1 @ s1
        if not denom > 0:
            raise FitError("spectrum insensitive to the bath occupation")
        n = float(s1 @ (y - s0) / denom)
        r = y - s0 - n * s1
        dof = max(1, w.size - 1 - int(fit_offset))
        err = math.sqrt(float(r @ r) / dof / denom)
        return n, err, float(math.sqrt(r @ r / (y @ y)))

    delta = 0.0
    if fit_offset:
        span = max_offset if max_offset is not None else 10 * device.gamma
        res = optimize.minimize_scalar(lambda d: solve_linear(d)[2], bounds=(-span, span),
                                       method="bounded", options={"xatol": 1e-6 * span})
        if not res.success:
            raise FitError("frequency-offset search did not converge")
        delta = float(res.x)
        if abs(abs(delta) - span) < 1e-3 * span:
            raise FitError(f"frequency offset at search boundary ({delta:.4g} rad/s)")
    n, err, resid = solve_linear(delta)
    lo, hi = bounds
    if not lo < n < hi:
        raise FitError(f"best-fit bath occupation {n:.6g} at or beyond search boundary [{lo}, {hi}]")
    return BathFit(n, err, delta, resid)


# -- CSV tables ------------------------------------------------------------


def read_table(path):
    """Read a comma-separated table with ``#`` metadata lines.

    Returns ``(columns, meta)``: a dict of float arrays keyed by header name
    and a dict of the ``# key = value`` metadata entries (strings).
    """
    meta = {}
    rows = []
    header = None
    with open(Path(path), newline="") as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            fields = next(csv.reader([s]))
            if header is None:
                header = [h.strip() for h in fields]
            else:
                rows.append(fields)
    if header is None:
        raise FitError(f"{path}: no header row")
    cols = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals, dtype=object)
    return cols, meta


def read_spectrum(path) -> Spectrum:
    cols, meta = read_table(path)
    if "freq_hz" not in cols or "value_quanta" not in cols:
        raise FitError(f"{path}: expected columns freq_hz, value_quanta")
    onesided = meta.get("onesided", "false").lower() == "true"
    return Spectrum(2 * math.pi * cols["freq_hz"], cols["value_quanta"],
                    meta.get("kind", "spectrum"), onesided=onesided, meta=meta)
