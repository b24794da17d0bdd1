"""Time-domain stochastic simulation of the closed feedback loop.

The four-variable linear SDE (cavity quadratures x_c, y_c and mechanical x, p)
is stepped with an exponential integrator: over each step the white-noise
inputs and the delayed feedback signal are held constant and the linear
drift is propagated exactly (matrix exponential of an augmented system).
The feedback filter is a pure delay line plus gain. Detection noise is added
to the simulated output before it enters the delay line.

Noise inputs are classical, with the symmetrized densities of the quantum
inputs (1/2 + n_c per optical quadrature, ``2 gamma omega_m^2 (n_T + 1/2)``
for the force). Equal-time moments such as ``<x^2 + p^2>/2`` are therefore
exact, and spectra compare with the symmetrized linsolve spectra.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np
from scipy import linalg, signal

from . import analytic, fitting, linsolve
from .linsolve import Spectrum, stability
from .model import FeedbackFilter, NoiseBudget, OpmDevice, ProbeTone

DIVERGENCE_LIMIT = 1e6


class SimulationError(RuntimeError):
    pass


class SimulationDiverged(SimulationError):
    pass


class RunTooShort(SimulationError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Integration settings. Times in seconds (or in units of 1/omega_m for
    dimensionless devices).

    ``decimate`` is the number of integration steps averaged into one
    recorded sample. ``delay_taps=None`` derives the delay from the filter
    phase.
    """

    dt: float
    duration: float
    seed: int
    burn_in: float = 0.0
    delay_taps: int | None = None
    decimate: int = 1
    allow_unstable: bool = False
    chunk: int = 1 << 20

    def problems(self, device: OpmDevice, gamma_eff=None):
        out = []
        limit = 2 * math.pi / (50 * max(device.omega_m, device.kappa))
        if not self.dt > 0:
            out.append("dt must be positive")
        elif self.dt > limit * (1 + 1e-12):
            out.append(f"dt = {self.dt:.4g} exceeds 2 pi/(50 max(omega_m, kappa)) = {limit:.4g}")
        if gamma_eff is not None and gamma_eff > 0 and self.duration < 100 / gamma_eff:
            out.append(
                f"duration {self.duration:.4g} shorter than 100/gamma_eff = {100 / gamma_eff:.4g}"
            )
        if self.decimate < 1:
            out.append("decimate must be >= 1")
        if self.burn_in < 0:
            out.append("burn_in must be non-negative")
        if self.delay_taps is not None and self.delay_taps < 1:
            out.append("delay line needs at least one tap")
        return out

    @property
    def steps(self):
        return int(round(self.duration / self.dt))

    @property
    def burn_steps(self):
        return int(round(self.burn_in / self.dt))


def delay_taps_for(filt: FeedbackFilter, omega_m, dt):
    """Number of whole steps realizing the filter phase as a causal delay.

    The delay ``((-phi) mod 2 pi)/omega_m`` reproduces the filter exactly at
    +-omega_m. A delay shorter than half a step is pushed out by one
    mechanical period.
    """
    tau = ((-filt.phase) % (2 * math.pi)) / omega_m
    k = int(round(tau / dt))
    if k < 1:
        k = int(round((tau + 2 * math.pi / omega_m) / dt))
    return k


def realized_filter(filt: FeedbackFilter, omega_m, dt, taps):
    """Linear-phase filter identical to the simulated delay line at all frequencies."""
    return FeedbackFilter(filt.gain, -omega_m * taps * dt)


@dataclass
class SimResult:
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    y_det: np.ndarray
    x_det: np.ndarray
    energy_blocks: np.ndarray  # mean (x^2+p^2)/2 over each recorded sample interval
    sample_dt: float
    config: SimConfig
    filter: FeedbackFilter  # realized delay-line filter
    meta: dict = field(default_factory=dict)

    def occupation(self, batches=40):
        """Mean phonon number and its batch-means standard error."""
        e = self.energy_blocks
        nb = min(batches, e.size)
        if nb < 2:
            raise SimulationError("not enough samples for an error estimate")
        usable = e[: e.size - e.size % nb].reshape(nb, -1).mean(axis=1)
        return float(e.mean() - 0.5), float(usable.std(ddof=1) / math.sqrt(nb))

    def save_csv(self, path, max_samples=None):
        """Write ``t, x, p, y_det, x_det`` with ``# key = value`` header lines.

        ``max_samples`` keeps only the start of the record; full runs can
        hold tens of millions of samples.
        """
        meta = dict(self.meta, sample_dt=repr(self.sample_dt), dt=repr(self.config.dt),
                    filter_gain=repr(self.filter.gain), filter_phase=repr(self.filter.phase))
        head = [f"# {k} = {v}" for k, v in meta.items()] + ["t,x,p,y_det,x_det"]
        n = self.x.size if max_samples is None else int(max_samples)
        data = np.column_stack([a[:n] for a in (self.t, self.x, self.p, self.y_det, self.x_det)])
        np.savetxt(path, data, delimiter=",", fmt="%.12g", header="\n".join(head), comments="")
        return path

    def heterodyne(self):
        """Complex record ``(X - iY)/sqrt(2)`` of the two detected quadratures."""
        return (self.x_det - 1j * self.y_det) / math.sqrt(2)


def _discretize(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter, dt):
    """Propagator, input map and step-mean maps for inputs (x_in, y_in, f, y_add, fb)."""
    k, wm, G, D = device.kappa, device.omega_m, probe.coupling, probe.detuning
    sk = math.sqrt(k)
    A = np.array([
        [-k / 2, -D, 0.0, 0.0],
        [D, -k / 2, -2 * G, 0.0],
        [0.0, 0.0, 0.0, wm],
        [-2 * G, 0.0, -wm, -device.gamma],
    ])
    B = np.zeros((4, 5))
    B[0, 0] = sk
    B[1, 1] = sk
    B[3, 2] = 1.0 / wm
    B[3, 4] = filt.gain / sk
    Z = np.zeros((9, 9))
    Z[:4, :4] = A
    Z[:4, 4:] = B
    W = np.zeros((18, 18))
    W[:9, :9] = Z
    W[:9, 9:] = np.eye(9)
    E = linalg.expm(W * dt)
    step = E[:4, :9]
    mean = E[:4, 9:] / dt  # step-averaged state as a function of (s_k, u_k)
    return step[:, :4].copy(), step[:, 4:].copy(), mean[:, :4].copy(), mean[:, 4:].copy()


@numba.njit(cache=True)
def _run_chunk(s, buf, pos, Phi, Gam, Ms, Mu, sk, noise, decim, limit,
               out_x, out_p, out_y, out_xd, out_e):
    n = noise.shape[0]
    nrec = n // decim
    u = np.zeros(5)
    snew = np.zeros(4)
    nbuf = buf.size
    for r in range(nrec):
        ax = 0.0
        ap = 0.0
        ay = 0.0
        axd = 0.0
        ae = 0.0
        for j in range(decim):
            i = r * decim + j
            u[0] = noise[i, 0]
            u[1] = noise[i, 1]
            u[2] = noise[i, 2]
            u[3] = noise[i, 3]
            u[4] = buf[pos]
            mx = 0.0
            mp = 0.0
            mxc = 0.0
            myc = 0.0
            for a in range(4):
                acc = 0.0
                m = 0.0
                for b in range(4):
                    acc += Phi[a, b] * s[b]
                    m += Ms[a, b] * s[b]
                for b in range(5):
                    acc += Gam[a, b] * u[b]
                    m += Mu[a, b] * u[b]
                snew[a] = acc
                if a == 0:
                    mxc = m
                elif a == 1:
                    myc = m
                elif a == 2:
                    mx = m
                else:
                    mp = m
            yd = sk * myc - u[1] + u[3]
            xd = sk * mxc - u[0] + noise[i, 4]
            buf[pos] = yd
            pos += 1
            if pos == nbuf:
                pos = 0
            for a in range(4):
                s[a] = snew[a]
            ae += 0.5 * (s[2] * s[2] + s[3] * s[3])
            ax += mx
            ap += mp
            ay += yd
            axd += xd
        if not (abs(s[2]) < limit):
            return pos, r
        out_x[r] = ax / decim
        out_p[r] = ap / decim
        out_y[r] = ay / decim
        out_xd[r] = axd / decim
        out_e[r] = ae / decim
    return pos, nrec


def config_hash(device, probe, filt, noise, cfg):
    blob = repr((asdict(device), asdict(probe), asdict(filt), asdict(noise), asdict(cfg)))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def simulate(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter, noise: NoiseBudget,
             cfg: SimConfig) -> SimResult:
    """Integrate the closed loop and return decimated time series.

    Raises :class:`SimulationDiverged` when |x| exceeds 1e6 unless
    ``cfg.allow_unstable`` is set, in which case the truncated run is returned.
    """
    taps = cfg.delay_taps if cfg.delay_taps is not None else delay_taps_for(filt, device.omega_m, cfg.dt)
    real = realized_filter(filt, device.omega_m, cfg.dt, taps)
    stable, ge, _ = stability(device, probe, real)
    probs = cfg.problems(device, ge if stable else None)
    if probs:
        raise ValueError("; ".join(probs))
    if not stable and not cfg.allow_unstable:
        raise SimulationDiverged(
            f"closed loop unstable (gamma_eff = {ge:.4g} rad/s); set allow_unstable for a short run"
        )
    Phi, Gam, Ms, Mu = _discretize(device, probe, filt, cfg.dt)
    sig = np.sqrt(np.array([
        0.5 + noise.cavity_occupation,
        0.5 + noise.cavity_occupation,
        2 * device.gamma * device.omega_m**2 * (noise.bath_occupation + 0.5),
        noise.amplifier_noise,
        noise.amplifier_noise,
    ]) / cfg.dt)

    decim = cfg.decimate
    burn = cfg.burn_steps - cfg.burn_steps % decim
    total = burn + cfg.steps - cfg.steps % decim
    chunk = max(decim, cfg.chunk - cfg.chunk % decim)
    nrec = total // decim
    rec = [np.empty(nrec) for _ in range(5)]

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    s = np.zeros(4)
    buf = np.zeros(taps)
    pos = 0
    done = 0
    diverged = False
    while done < total:
        n = min(chunk, total - done)
        z = rng.standard_normal((n, 5))
        z *= sig
        r0 = done // decim
        views = [a[r0 : r0 + n // decim] for a in rec]
        pos, got = _run_chunk(s, buf, pos, Phi, Gam, Ms, Mu, math.sqrt(device.kappa), z, decim,
                              DIVERGENCE_LIMIT, *views)
        if got < n // decim:
            if not cfg.allow_unstable:
                raise SimulationDiverged(
                    f"|x| exceeded {DIVERGENCE_LIMIT:g} at t = {(done + got * decim) * cfg.dt:.6g}"
                )
            nrec = r0 + got
            diverged = True
            break
        done += n
    skip = burn // decim
    rec = [a[skip:nrec] for a in rec]
    sample_dt = decim * cfg.dt
    t = (np.arange(rec[0].size) + skip + 0.5) * sample_dt
    meta = {
        "seed": cfg.seed,
        "delay_taps": taps,
        "hash": config_hash(device, probe, filt, noise, cfg),
        "gamma_eff": ge,
        "diverged": diverged,
    }
    return SimResult(t, rec[0], rec[1], rec[2], rec[3], rec[4], sample_dt, cfg, real, meta)


def periodogram(series, sample_dt, segment_length, overlap=0.5, kind="periodogram"):
    """Welch-averaged spectrum in the package's density convention.

    Real series give a one-sided :class:`Spectrum` holding the two-sided
    density; complex series give a two-sided spectrum on (-pi/dt, pi/dt).
    ``segment_length`` is in seconds.
    """
    x = np.asarray(series)
    nseg = int(round(segment_length / sample_dt))
    if nseg < 8:
        raise ValueError("segment shorter than 8 samples")
    if x.size < nseg:
        raise ValueError(f"series of {x.size} samples shorter than one segment ({nseg})")
    fs = 1.0 / sample_dt
    if np.iscomplexobj(x):
        f, P = signal.welch(x, fs=fs, nperseg=nseg, noverlap=int(overlap * nseg),
                            return_onesided=False, detrend=False)
        order = np.argsort(f)
        return Spectrum(2 * math.pi * f[order], P[order], kind, onesided=False)
    f, P = signal.welch(x, fs=fs, nperseg=nseg, noverlap=int(overlap * nseg), detrend=False)
    return Spectrum(2 * math.pi * f, P / 2, kind, onesided=True)


def suggest_config(device: OpmDevice, probe: ProbeTone, filt: FeedbackFilter, seed=0,
                   linewidths=2e4, oversample=50):
    """A config sized for a few-percent occupation estimate."""
    dt = 2 * math.pi / (oversample * max(device.omega_m, device.kappa))
    stable, ge, _ = stability(device, probe, filt)
    if not stable:
        raise SimulationError("cannot size a run for an unstable loop")
    taps = delay_taps_for(filt, device.omega_m, dt)
    decim = max(1, int(2 * math.pi / (50 * device.omega_m) / dt))
    return SimConfig(dt=dt, duration=linewidths / ge, seed=seed, burn_in=20 / ge,
                     delay_taps=taps, decimate=decim)


# -- cross-validation ------------------------------------------------------


@dataclass(frozen=True)
class Comparison:
    observable: str
    linsolve: float
    tdoracle: float
    rel_dev: float
    tolerance: float

    @property
    def ok(self):
        return abs(self.rel_dev) <= self.tolerance


def cross_validate(device, probe, filt, noise, seed=0, linewidths=1e4, tolerance=0.05,
                   segment_linewidths=20.0, correlator_scale=1.0, dt=None, duration=None):
    """Run both solvers on one configuration and compare occupation and linewidth.

    ``correlator_scale`` multiplies the thermal force density fed to the
    time-domain run only; values other than one are a negative control.
    Returns ``([Comparison, ...], SimResult)``.
    """
    if not stability(device, probe, filt)[0]:
        raise SimulationDiverged("oracle comparison needs a stable configuration")
    cfg = suggest_config(device, probe, filt, seed=seed, linewidths=linewidths)
    if dt is not None:
        cfg = replace(cfg, dt=dt, delay_taps=delay_taps_for(filt, device.omega_m, dt),
                      decimate=max(1, int(cfg.decimate * cfg.dt / dt)))
    if duration is not None:
        cfg = replace(cfg, duration=duration)
    real = realized_filter(filt, device.omega_m, cfg.dt, cfg.delay_taps)
    stable, ge, we = stability(device, probe, real)
    if not stable:
        raise SimulationDiverged("delay-line filter leaves the loop unstable")
    # relative standard error of a time-averaged energy ~ sqrt(2/(gamma_eff T))
    need = 8.0 / (ge * tolerance**2)
    if cfg.duration < need:
        raise RunTooShort(
            f"oracle run of {cfg.duration:.4g} s too short for tolerance {tolerance:g}; "
            f"need duration >= {need:.4g} s"
        )
    td_noise = replace(noise, bath_occupation=(noise.bath_occupation + 0.5) * correlator_scale - 0.5)
    res = simulate(device, probe, filt, td_noise, cfg)
    n_td, _ = res.occupation()
    tr = linsolve.solve(device, probe, real)
    n_lin = linsolve.occupation_numeric(linsolve.displacement_spectrum(tr, noise),
                                        linsolve.momentum_spectrum(tr, noise))
    spec = periodogram(res.x, res.sample_dt, segment_linewidths * 2 * math.pi / ge)
    # +-10 linewidths: wider windows at low Q let the Lorentzian fit lock onto
    # the non-Lorentzian wings
    win = (max(we - 10 * ge, 0.5 * we), we + 10 * ge)
    fit = fitting.fit_lorentzian(spec, win, method="whittle")
    # same estimator applied to the symmetrized linsolve spectrum on the same points
    pts = spec.window(*win).omega
    s_pos, s_neg = (
        linsolve.displacement_spectrum(linsolve.solve_closed_loop(device, probe, real, sgn * pts),
                                       noise, check_grid=False).values
        for sgn in (1, -1)
    )
    ref = fitting.fit_lorentzian(Spectrum(pts, 0.5 * (s_pos + s_neg), "displacement"),
                                 method="whittle")
    report = [Comparison(name, a, b, (b - a) / a, tolerance)
              for name, a, b in (("occupation", n_lin, n_td), ("linewidth", ref.fwhm, fit.fwhm))]
    return report, res


def canonical_configurations():
    """Five dimensionless test cases (omega_m = 1) spanning the operating regimes.

    Returns ``{name: (device, probe, filter, noise)}``.
    """
    out = {}
    dev = OpmDevice(1.0, 0.01, 1.0, 1e3, 1e-3)
    out["open_loop"] = (dev, ProbeTone(0.0, 0.0), FeedbackFilter(0.0, 0.0), NoiseBudget(20.0))

    dev = OpmDevice(1.0, 0.002, 1.04, 1e3, 1e-3)
    probe = ProbeTone(0.0, 0.05)
    phi = analytic.optimal_phase(dev.kappa, dev.omega_m)
    per_gain = analytic.gamma_fb(probe.coupling, 1.0, dev.kappa, dev.omega_m)
    nb = NoiseBudget(50.0, 2.0)
    out["resonant_weak"] = (dev, probe, FeedbackFilter(5 * dev.gamma / per_gain, phi), nb)
    out["resonant_strong"] = (dev, probe, FeedbackFilter(50 * dev.gamma / per_gain, phi), nb)

    dev = OpmDevice(1.0, 0.002, 0.3, 1e3, 1e-3)
    probe = ProbeTone(1.0, 0.02)
    phi = analytic.optimal_phase_blue(dev.kappa, dev.omega_m)
    crit = analytic.critical_gain_blue(dev, probe.coupling)
    out["blue_stabilized"] = (dev, probe, FeedbackFilter(3 * crit, phi), NoiseBudget(50.0, 2.0))

    dev = OpmDevice(1.0, 0.005, 20.0, 1e3, 1e-3)
    probe = ProbeTone(0.0, 0.5)
    filt = FeedbackFilter(1.0, 0.5 * math.pi)
    per_gain = analytic.effective_params_resonant(dev, probe.coupling, filt).gamma_eff - dev.gamma
    out["bad_cavity"] = (dev, probe, filt.with_gain(10 * dev.gamma / per_gain), NoiseBudget(50.0, 2.0))
    return out
