"""Frequency-domain solution of the closed feedback loop at arbitrary probe detuning.

At each angular frequency the four unknowns (x_c, y_c, x, p) solve

    (kappa/2 - i w) x_c + Delta y_c           = sqrt(kappa) x_in
    -Delta x_c + (kappa/2 - i w) y_c + 2G x   = sqrt(kappa) y_in
    -i w x - omega_m p                         = 0
    2G x_c - A[w] y_c + omega_m x + (gamma - i w) p
                     = f_th/omega_m - A[w]/sqrt(kappa) y_in + A[w]/sqrt(kappa) y_add

where the last row already contains the feedback force built from the
detected quadrature ``y_out + y_add`` with ``y_out = sqrt(kappa) y_c - y_in``.

Inputs are ordered (x_in, y_in, f_th, y_add, x_add); ``x_add`` is the
amplifier noise of the quadrature that is recorded but not fed back.

Spectral densities follow ``<a^2> = int S_a(w) dw / 2pi`` over the whole
real line, with ``S_ab(w) = int <a(t) b(0)> exp(i w t) dt``; thermal and
vacuum inputs carry their quantum (unsymmetrized) correlators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .model import FeedbackFilter, NoiseBudget, OpmDevice, ProbeTone

INPUTS = ("x_in", "y_in", "f_th", "y_add", "x_add")
STATES = ("x_c", "y_c", "x", "p")


class SingularSystemError(ArithmeticError):
    pass


class GridError(ValueError):
    pass


class PoleSearchError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FrequencyGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise GridError("grid needs at least two points")
        if not np.all(np.diff(pts) > 0):
            raise GridError("grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def span(self):
        return self.points[0], self.points[-1]

    def resolution_near(self, center, halfwidth):
        sel = np.abs(self.points - center) <= halfwidth
        if sel.sum() < 2:
            return np.inf
        return float(np.max(np.diff(self.points[sel])))

    @classmethod
    def uniform(cls, start, stop, n):
        return cls(np.linspace(start, stop, n))

    @classmethod
    def around_peaks(cls, centers, linewidth, halfspan=40.0, per_linewidth=50,
                     extent=None, tail_step=0.02):
        """Dense uniform windows of +-``halfspan`` linewidths around each center,
        joined by sinh-spaced tails out to ``extent`` (both signs)."""
        centers = np.atleast_1d(np.asarray(centers, dtype=float))
        if extent is None:
            extent = 20 * np.max(np.abs(centers))
        h = linewidth * halfspan
        dense = [
            np.linspace(c - h, c + h, int(round(2 * halfspan * per_linewidth)) + 1)
            for c in centers
        ]
        u = np.arange(0.0, math.asinh(2 * extent / linewidth), tail_step)
        offs = linewidth * np.sinh(u)
        tails = [c + s * offs for c in centers for s in (-1, 1)]
        pts = np.concatenate(dense + tails + [np.linspace(-extent, extent, 401)])
        pts = pts[np.abs(pts) <= extent]
        pts = np.unique(np.round(pts, 9))
        return cls(pts)


@dataclass(frozen=True)
class Spectrum:
    """Sampled spectral density.

    ``onesided`` spectra are defined on w >= 0 and hold the two-sided density
    of a real signal, so their variance counts positive frequencies twice.
    """

    omega: np.ndarray
    values: np.ndarray
    kind: str
    onesided: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def variance(self):
        v = np.trapezoid(self.values, self.omega) / (2 * math.pi)
        return 2 * v if self.onesided else v

    def window(self, lo, hi):
        sel = (self.omega >= lo) & (self.omega <= hi)
        return replace(self, omega=self.omega[sel], values=self.values[sel])


def _input_spectra(omega, device: OpmDevice, noise: NoiseBudget):
    """Input correlator matrices S_uu(w), shape (n, 5, 5)."""
    n = omega.size
    S = np.zeros((n, 5, 5), dtype=complex)
    vac = 0.5 + noise.cavity_occupation
    S[:, 0, 0] = vac
    S[:, 1, 1] = vac
    S[:, 0, 1] = 0.5j
    S[:, 1, 0] = -0.5j
    S[:, 2, 2] = (
        2 * device.gamma * device.omega_m**2
        * (noise.bath_occupation + 0.5 + 0.5 * np.sign(omega))
    )
    S[:, 3, 3] = noise.amplifier_noise
    S[:, 4, 4] = noise.amplifier_noise
    return S


def _system(omega, device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter):
    w = np.asarray(omega, dtype=complex)
    k, wm, G, D = device.kappa, device.omega_m, probe.coupling, probe.detuning
    A = filt.gain * np.exp(-1j * filt.phase * w / wm)
    sk = math.sqrt(k)
    n = w.size
    M = np.zeros((n, 4, 4), dtype=complex)
    M[:, 0, 0] = k / 2 - 1j * w
    M[:, 0, 1] = D
    M[:, 1, 0] = -D
    M[:, 1, 1] = k / 2 - 1j * w
    M[:, 1, 2] = 2 * G
    M[:, 2, 2] = -1j * w
    M[:, 2, 3] = -wm
    M[:, 3, 0] = 2 * G
    M[:, 3, 1] = -A
    M[:, 3, 2] = wm
    M[:, 3, 3] = device.gamma - 1j * w
    B = np.zeros((n, 4, 5), dtype=complex)
    B[:, 0, 0] = sk
    B[:, 1, 1] = sk
    B[:, 3, 1] = -A / sk
    B[:, 3, 2] = 1.0 / wm
    B[:, 3, 3] = A / sk
    return M, B, A


@dataclass(frozen=True)
class ClosedLoopTransfer:
    """Response of (x_c, y_c, x, p) and of the detected quadratures to each input."""

    device: OpmDevice
    probe: ProbeTone
    filter: FeedbackFilter
    omega: np.ndarray
    H: np.ndarray  # (n, 4 states, 5 inputs)
    out: np.ndarray  # (n, 2 detected quadratures X, Y, 5 inputs)

    def coeff(self, state, inp):
        return self.H[:, STATES.index(state), INPUTS.index(inp)]

    # named transfer coefficients
    X_cx = property(lambda s: s.coeff("x_c", "x_in"))
    Y_cy = property(lambda s: s.coeff("y_c", "y_in"))
    Y_x = property(lambda s: s.coeff("y_c", "x_in"))
    Y_f = property(lambda s: s.coeff("y_c", "f_th"))
    Y_n = property(lambda s: s.coeff("y_c", "y_add"))
    X_f = property(lambda s: s.coeff("x", "f_th"))
    X_bax = property(lambda s: s.coeff("x", "x_in"))
    X_inj = property(lambda s: s.coeff("x", "y_in"))
    X_n = property(lambda s: s.coeff("x", "y_add"))
    P_f = property(lambda s: s.coeff("p", "f_th"))
    P_bax = property(lambda s: s.coeff("p", "x_in"))
    P_inj = property(lambda s: s.coeff("p", "y_in"))
    P_n = property(lambda s: s.coeff("p", "y_add"))

    def mirrored(self):
        """Transfer evaluated on the negated grid (used for heterodyne spectra)."""
        return solve_closed_loop(self.device, self.probe, self.filter, -self.omega)

    @cached_property
    def pole(self):
        return closed_loop_pole(self.device, self.probe, self.filter)


def solve_closed_loop(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter,
                      grid) -> ClosedLoopTransfer:
    omega = grid.points if isinstance(grid, FrequencyGrid) else np.asarray(grid, dtype=float)
    M, B, _ = _system(omega, device, probe, filt)
    scale = np.prod(np.linalg.norm(M, axis=2), axis=1)
    det = np.linalg.det(M)
    bad = np.abs(det) <= 1e-13 * scale
    if np.any(bad):
        w0 = omega[np.argmax(bad)]
        raise SingularSystemError(
            f"closed-loop system singular at omega = {w0:.9g} rad/s "
            f"({w0 / (2 * math.pi):.9g} Hz)"
        )
    H = np.linalg.solve(M, B)
    sk = math.sqrt(device.kappa)
    out = np.empty((omega.size, 2, 5), dtype=complex)
    out[:, 0, :] = sk * H[:, 0, :]
    out[:, 1, :] = sk * H[:, 1, :]
    out[:, 0, 0] -= 1.0
    out[:, 1, 1] -= 1.0
    out[:, 0, 4] += 1.0
    out[:, 1, 3] += 1.0
    return ClosedLoopTransfer(device, probe, filt, np.asarray(omega, dtype=float), H, out)


def _quadratic(rows, S):
    """Real diagonal of rows @ S @ rows^H, rows shape (n, m, 5)."""
    return np.real(np.einsum("nai,nij,naj->na", rows, S, rows.conj()))


def _channel_quadratic(rows, S, channels):
    idx = [INPUTS.index(c) for c in channels]
    sub = rows[:, :, idx]
    return _quadratic(sub, S[:, idx][:, :, idx])


def _peak_info(transfer: ClosedLoopTransfer):
    pole = transfer.pole
    return {"omega_eff": pole.real, "gamma_eff": -2 * pole.imag}


def _check_resolution(transfer: ClosedLoopTransfer, check=True):
    info = _peak_info(transfer)
    if not check:
        return info
    we, ge = abs(info["omega_eff"]), info["gamma_eff"]
    if ge <= 0:
        return info
    grid = FrequencyGrid(transfer.omega)
    for c in (-we, we):
        res = grid.resolution_near(c, ge)
        if res > ge / 10 and np.isfinite(res):
            raise GridError(
                f"grid resolution {res:.4g} rad/s near {c:.6g} rad/s too coarse; "
                f"need <= {ge / 10:.4g} rad/s"
            )
        if not np.isfinite(res):
            raise GridError(f"grid does not resolve the mechanical peak at {c:.6g} rad/s")
    return info


def displacement_spectrum(transfer: ClosedLoopTransfer, noise: NoiseBudget,
                          kind="displacement", channels=INPUTS, check_grid=True) -> Spectrum:
    """Position (or momentum, ``kind='momentum'``) spectrum in quanta per unit frequency."""
    info = _check_resolution(transfer, check_grid)
    row = {"displacement": 2, "momentum": 3}[kind]
    S = _input_spectra(transfer.omega, transfer.device, noise)
    rows = transfer.H[:, row : row + 1, :]
    vals = _channel_quadratic(rows, S, channels)[:, 0]
    return Spectrum(transfer.omega, vals, kind, meta=info)


def momentum_spectrum(transfer, noise, channels=INPUTS, check_grid=True):
    return displacement_spectrum(transfer, noise, kind="momentum", channels=channels,
                                 check_grid=check_grid)


def occupation_numeric(s_x: Spectrum, s_p: Spectrum, min_linewidths=20.0):
    """Mean phonon number from position and momentum spectra (trapezoidal rule)."""
    if s_x.omega.shape != s_p.omega.shape or not np.allclose(s_x.omega, s_p.omega):
        raise GridError("position and momentum spectra must share a grid")
    we = s_x.meta.get("omega_eff")
    ge = s_x.meta.get("gamma_eff")
    if we is not None and ge is not None and ge > 0:
        lo, hi = s_x.omega[0], s_x.omega[-1]
        need = min_linewidths * ge
        if lo > -abs(we) - need or hi < abs(we) + need:
            raise GridError(
                f"grid span [{lo:.6g}, {hi:.6g}] rad/s must cover +-omega_eff "
                f"with {min_linewidths:g} linewidths each side"
            )
    total = np.trapezoid(0.5 * (s_x.values + s_p.values), s_x.omega) / (2 * math.pi)
    return total - 0.5


def occupation_breakdown(transfer: ClosedLoopTransfer, noise: NoiseBudget):
    """Numerically integrated (n_T, n_qba, n_fb, n_m) split by input channel.

    Thermal force -> n_T, x-quadrature vacuum -> n_qba, y-quadrature vacuum
    and amplifier noise -> n_fb. Zero-point energy is carried by the parts, so
    ``n_m + 1/2`` is their sum.
    """
    from .analytic import OccupationBreakdown

    parts = {}
    for name, ch in (("n_T", ("f_th",)), ("n_qba", ("x_in",)), ("n_fb", ("y_in", "y_add"))):
        sx = displacement_spectrum(transfer, noise, channels=ch)
        sp = momentum_spectrum(transfer, noise, channels=ch)
        parts[name] = occupation_numeric(sx, sp) + 0.5
    n_m = sum(parts.values()) - 0.5
    return OccupationBreakdown(parts["n_T"], parts["n_qba"], parts["n_fb"], n_m)


def output_spectrum(transfer: ClosedLoopTransfer, noise: NoiseBudget,
                    check_grid=True, convention="quantum") -> Spectrum:
    """Heterodyne spectrum of the recorded output (quanta).

    Frequencies are measured from the probe; the upper (anti-Stokes) sideband
    of the probe appears at +omega_m and the lower at -omega_m.

    ``convention="quantum"`` returns ``<a_out^dag a_out> + 1/2`` with the full
    vacuum correlations of the optical inputs. ``"symmetrized"`` treats the
    optical vacua as classical uncorrelated noise of 1/2 quantum per
    quadrature (the mechanical bath keeps its quantum asymmetry); in-loop
    squashing of vacuum noise then appears, as in semiclassical treatments.
    """
    if convention not in ("quantum", "symmetrized"):
        raise ValueError(f"unknown convention {convention!r}")
    info = _check_resolution(transfer, check_grid)
    mir = transfer.mirrored()
    S = _input_spectra(mir.omega, mir.device, noise)
    offset = 0.5
    if convention == "symmetrized":
        S[:, 0, 1] = S[:, 1, 0] = 0.0
        offset = 0.0
    c = np.array([1.0, -1.0j]) / math.sqrt(2)
    r = np.einsum("a,nai->ni", c, mir.out)[:, None, :]
    vals = _quadratic(r, S)[:, 0] + offset
    return Spectrum(transfer.omega, vals, "heterodyne-output",
                    meta=dict(info, convention=convention))


def quadrature_spectrum(transfer: ClosedLoopTransfer, noise: NoiseBudget,
                        quadrature="y") -> Spectrum:
    """Symmetrized spectrum of one detected quadrature (what a classical record shows)."""
    q = {"x": 0, "y": 1}[quadrature]
    S = _input_spectra(transfer.omega, transfer.device, noise)
    S_sym = S.copy()
    S_sym[:, 0, 1] = S_sym[:, 1, 0] = 0.0
    S_sym[:, 2, 2] = 2 * transfer.device.gamma * transfer.device.omega_m**2 * (
        noise.bath_occupation + 0.5
    )
    vals = _quadratic(transfer.out[:, q : q + 1, :], S_sym)[:, 0]
    return Spectrum(transfer.omega, vals, f"quadrature-{quadrature}", meta=_peak_info(transfer))


def _det_log_derivative(w, device, probe, filt):
    M, _, A = _system(np.array([w]), device, probe, filt)
    dM = np.zeros((4, 4), dtype=complex)
    dM[0, 0] = dM[1, 1] = dM[2, 2] = dM[3, 3] = -1j
    dM[3, 1] = 1j * filt.phase / device.omega_m * A[0]
    return np.trace(np.linalg.solve(M[0], dM))


def closed_loop_pole(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter,
                     seed=None, maxiter=200):
    """Mechanical pole of the closed loop; damped poles have negative imaginary part."""
    w = complex(device.omega_m, -device.gamma / 2) if seed is None else complex(seed)
    cap = 0.25 * min(device.kappa, device.omega_m)
    tol = 1e-12 * device.omega_m
    path = [w]
    for _ in range(maxiter):
        try:
            step = -1.0 / _det_log_derivative(w, device, probe, filt)
        except np.linalg.LinAlgError:
            # landed exactly on the root
            return w
        if abs(step) > cap:
            step *= cap / abs(step)
        w += step
        path.append(w)
        if abs(step) < tol:
            return w
    raise PoleSearchError(
        f"pole search did not converge from seed {path[0]:.9g}; last iterates "
        + ", ".join(f"{z:.9g}" for z in path[-3:])
    )


def stability(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter):
    """``(stable, gamma_eff, omega_eff)`` from the closed-loop mechanical pole."""
    pole = closed_loop_pole(device, probe, filt)
    gamma_eff = -2 * pole.imag
    return gamma_eff > 0, gamma_eff, pole.real


def find_stability_boundary(device: OpmDevice, probe: ProbeTone, phase, gain_bracket,
                            rtol=1e-3):
    """Feedback gain at which the mechanical damping crosses zero (bisection)."""
    lo, hi = map(float, gain_bracket)

    def g_eff(a0):
        return stability(device, probe, FeedbackFilter(a0, phase))[1]

    f_lo, f_hi = g_eff(lo), g_eff(hi)
    if np.sign(f_lo) == np.sign(f_hi):
        raise ValueError(
            f"no stability change in gain bracket [{lo:.6g}, {hi:.6g}] rad/s "
            f"(gamma_eff = {f_lo:.4g}, {f_hi:.4g} rad/s)"
        )
    target = rtol * device.gamma
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = g_eff(mid)
        if abs(f_mid) < target:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    raise PoleSearchError("stability boundary bisection did not converge")


def default_grid(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter,
                 halfspan=40.0, per_linewidth=50):
    stable, ge, we = stability(device, probe, filt)
    # damped peaks narrower than gamma (near an instability) need their own scale;
    # the floor keeps the dense window above float resolution at omega_eff
    width = max(ge, 1e-9 * abs(we)) if stable else max(abs(ge), device.gamma)
    return FrequencyGrid.around_peaks(
        [-abs(we), abs(we)], width, halfspan=halfspan, per_linewidth=per_linewidth,
        extent=max(20 * device.omega_m, 4 * device.kappa + 2 * abs(probe.detuning)),
    )


def solve(device, probe, filt, grid=None):
    """Convenience: solve on the default grid when none is given."""
    if grid is None:
        grid = default_grid(device, probe, filt)
    return solve_closed_loop(device, probe, filt, grid)
