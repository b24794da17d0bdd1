import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from optofeedback import analytic, fitting, linsolve
from optofeedback.linsolve import (FrequencyGrid, GridError, displacement_spectrum,
                                   momentum_spectrum, occupation_numeric, output_spectrum,
                                   solve, solve_closed_loop, stability)
from optofeedback.model import (FeedbackFilter, NoiseBudget, OpmDevice, ProbeTone, hz,
                                reference_device, to_hz)


def n_numeric(device, probe, filt, noise, grid=None):
    tr = solve(device, probe, filt, grid)
    return occupation_numeric(displacement_spectrum(tr, noise), momentum_spectrum(tr, noise))


def bare(w, dev):
    return 1.0 / (dev.omega_m**2 - w**2 - 1j * dev.gamma * w)


@pytest.fixture(scope="module")
def phi_m():
    d = reference_device()
    return analytic.optimal_phase(d.kappa, d.omega_m)


# -- transfer coefficients ----------------------------------------------------


def test_decoupled_system(device, rng):
    w = np.sort(rng.uniform(-2, 2, 50)) * device.omega_m
    tr = solve_closed_loop(device, ProbeTone(0.0, 0.0), FeedbackFilter(0.0, 0.0), w)
    np.testing.assert_allclose(tr.X_f, bare(w, device), rtol=1e-12)
    for c in (tr.X_bax, tr.X_inj, tr.X_n):
        assert np.all(c == 0)


def test_backaction_coefficient_closed_form(device, rng):
    G = hz(427e3)
    w = np.sort(rng.uniform(-1.5, 1.5, 10)) * device.omega_m
    tr = solve_closed_loop(device, ProbeTone(0.0, G), FeedbackFilter(0.0, 0.0), w)
    chi = bare(w, device)
    np.testing.assert_allclose(tr.X_f, chi, rtol=1e-9)
    k, wm = device.kappa, device.omega_m
    np.testing.assert_allclose(tr.X_bax, -4 * G * wm * math.sqrt(k) / (k - 2j * w) * chi, rtol=1e-9)


@given(st.floats(0, 3e6), st.floats(-3, 3))
@settings(max_examples=25)
def test_noise_injection_magnitudes_equal(A0, x):
    dev = reference_device()
    filt = FeedbackFilter(hz(A0), analytic.optimal_phase(dev.kappa, dev.omega_m))
    w = np.array([x * dev.omega_m])
    tr = solve_closed_loop(dev, ProbeTone(0.0, hz(427e3)), filt, w)
    assert abs(tr.X_n[0]) == pytest.approx(abs(tr.X_inj[0]), rel=1e-10, abs=1e-300)


def test_pole_at_optimal_phase(device, phi_m):
    G, A0 = hz(427e3), hz(76e3)
    ok, ge, we = stability(device, ProbeTone(0.0, G), FeedbackFilter(A0, phi_m))
    assert ok
    assert ge == pytest.approx(device.gamma + analytic.gamma_fb(G, A0, device.kappa, device.omega_m), rel=1e-3)


def test_open_loop_resonant_probe_no_dynamical_backaction(device):
    ok, ge, _ = stability(device, ProbeTone(0.0, hz(427e3)), FeedbackFilter(0.0, 0.0))
    assert ok and ge == pytest.approx(device.gamma, rel=1e-9)


# -- spectra and occupations --------------------------------------------------


def test_ground_state():
    dev = OpmDevice(1.0, 1e-4, 1.0, 1e3, 1e-3)
    n = n_numeric(dev, ProbeTone(0.0, 0.0), FeedbackFilter(0.0, 0.0), NoiseBudget(0.0))
    assert abs(n) < 1e-3


@pytest.mark.parametrize("nT", [0.3, 20.0, 205.0])
def test_thermal_open_loop(device, nT):
    n = n_numeric(device, ProbeTone(0.0, 0.0), FeedbackFilter(0.0, 0.0), NoiseBudget(nT))
    assert n == pytest.approx(nT, rel=5e-3)


def test_zero_gain_occupation_with_backaction(device):
    # measurement backaction at the operating coupling, bath at the low end of the fitted band
    n = n_numeric(device, ProbeTone(0.0, hz(427e3)), FeedbackFilter(0.0, 0.0), NoiseBudget(200.0, 13.0))
    assert n == pytest.approx(440.0, rel=0.10)
    assert n == pytest.approx(441.8284, rel=1e-4)


@pytest.mark.xfail(strict=True, reason="the residual thermal term (~0.9 quanta at n_T = 205) is not "
                   "negligible at G/2pi = 427 kHz; the sweep minimum is 3.01, not 2.1")
def test_gain_sweep_minimum_near_quantum_limit(device, phi_m):
    G, noise = hz(427e3), NoiseBudget(205.0, 13.0)
    res = optimize.minimize_scalar(
        lambda x: n_numeric(device, ProbeTone(0.0, G), FeedbackFilter(hz(1e3) * math.exp(x), phi_m), noise),
        bounds=(math.log(10), math.log(2000)), method="bounded")
    _, n_min = analytic.optimal_operating_point(device, noise, G)
    assert res.fun == pytest.approx(n_min, rel=0.05)


def test_gain_sweep_minimum_matches_full_budget(device, phi_m):
    G, noise = hz(427e3), NoiseBudget(205.0, 13.0)
    res = optimize.minimize_scalar(
        lambda x: n_numeric(device, ProbeTone(0.0, G), FeedbackFilter(hz(1e3) * math.exp(x), phi_m), noise),
        bounds=(math.log(10), math.log(2000)), method="bounded", options={"xatol": 1e-3})
    ref = optimize.minimize_scalar(
        lambda x: analytic.occupation_resonant(device, G, FeedbackFilter(hz(1e3) * math.exp(x), phi_m), noise).n_m,
        bounds=(math.log(10), math.log(2000)), method="bounded")
    assert res.fun == pytest.approx(ref.fun, rel=0.01)


def test_quantum_limited_detection_reaches_ground_state(bad_cavity_device):
    dev = bad_cavity_device
    G, noise = hz(1e6), NoiseBudget(0.0, 0.0)
    a0, n_min = analytic.optimal_operating_point(dev, noise, G)
    filt = FeedbackFilter(a0, analytic.optimal_phase(dev.kappa, dev.omega_m))
    assert n_min == 0.0
    # residual of order gamma_eff/omega_m from the high-Q approximations
    assert abs(n_numeric(dev, ProbeTone(0.0, G), filt, noise)) < 5e-3


def test_resonant_occupation_matches_closed_form(device, phi_m):
    rng = np.random.default_rng(7)
    noise = NoiseBudget(205.0, 13.0)
    for ratio in np.geomspace(1, 1e3, 20):
        G = hz(rng.uniform(50e3, 600e3))
        per = analytic.gamma_fb(G, 1.0, device.kappa, device.omega_m)
        filt = FeedbackFilter(ratio * device.gamma / per, phi_m)
        closed = analytic.occupation_resonant(device, G, filt, noise).n_m
        assert n_numeric(device, ProbeTone(0.0, G), filt, noise) == pytest.approx(closed, rel=0.02)


def test_breakdown_sums(device, phi_m):
    tr = solve(device, ProbeTone(0.0, hz(427e3)), FeedbackFilter(hz(76e3), phi_m))
    b = linsolve.occupation_breakdown(tr, NoiseBudget(205.0, 13.0))
    assert b.residual() < 1e-12
    closed = analytic.occupation_resonant(device, hz(427e3), FeedbackFilter(hz(76e3), phi_m),
                                          NoiseBudget(205.0, 13.0))
    assert b.n_T == pytest.approx(closed.n_T, rel=0.02)


def test_thermal_part_linear_in_bath(device, phi_m):
    tr = solve(device, ProbeTone(0.0, hz(427e3)), FeedbackFilter(hz(28e3), phi_m))
    s0 = displacement_spectrum(tr, NoiseBudget(0.0, 13.0)).values
    s1 = displacement_spectrum(tr, NoiseBudget(100.0, 13.0)).values
    s3 = displacement_spectrum(tr, NoiseBudget(300.0, 13.0)).values
    np.testing.assert_allclose(s3 - s0, 3 * (s1 - s0), rtol=1e-9, atol=1e-12 * np.max(s3))


def test_spectra_real_and_output_nonnegative(device, phi_m):
    tr = solve(device, ProbeTone(0.0, hz(427e3)), FeedbackFilter(hz(206e3), phi_m))
    for s in (displacement_spectrum(tr, NoiseBudget(370, 13)), output_spectrum(tr, NoiseBudget(370, 13))):
        assert np.isrealobj(s.values)
    assert np.all(output_spectrum(tr, NoiseBudget(370, 13)).values >= 0)


def test_output_floor_far_from_sidebands(device, phi_m):
    w = np.array([0.0, 0.5, 3.0, -3.0]) * device.omega_m
    tr = solve_closed_loop(device, ProbeTone(0.0, hz(427e3)), FeedbackFilter(hz(28e3), phi_m), w)
    np.testing.assert_allclose(output_spectrum(tr, NoiseBudget(205, 13), check_grid=False).values,
                               13.5, rtol=1e-3)


def test_upper_sideband_squashed_more(device, phi_m):
    probe, filt, noise = ProbeTone(0.0, hz(427e3)), FeedbackFilter(hz(206e3), phi_m), NoiseBudget(370, 13)
    _, ge, we = stability(device, probe, filt)
    dip = {}
    for side in (-1, 1):
        w = side * we + np.linspace(-30, 30, 3001) * ge
        v = output_spectrum(solve_closed_loop(device, probe, filt, w), noise, check_grid=False).values
        dip[side] = 13.5 - v.min()
    assert dip[1] > dip[-1] > 0


def test_sideband_asymmetry_matches_bad_cavity_form(bad_cavity_device):
    dev = bad_cavity_device
    G, noise = hz(100e3), NoiseBudget(2.0, 13.0)
    probe, filt = ProbeTone(0.0, G), FeedbackFilter(0.0, 0.0)
    tr = solve(dev, probe, filt)
    out = output_spectrum(tr, noise)
    ref = analytic.squashed_spectrum_badcavity(
        tr.omega, dev, G, 0.0, noise, dev.gamma,
        displacement_spectrum(tr.mirrored(), noise, check_grid=False).values)
    areas = {}
    for side in (-1, 1):
        sel = np.abs(tr.omega - side * dev.omega_m) < 30 * dev.gamma
        areas[side] = [np.trapezoid(s[sel] - 13.5, tr.omega[sel]) for s in (out.values, ref)]
    ratio_num = areas[1][0] / areas[-1][0]
    ratio_ref = areas[1][1] / areas[-1][1]
    assert ratio_num == pytest.approx(ratio_ref, rel=0.01)
    assert abs(ratio_num - 1) > 0.1


def test_coarse_grid_rejected(device):
    grid = FrequencyGrid.uniform(-2 * device.omega_m, 2 * device.omega_m, 1001)
    tr = solve_closed_loop(device, ProbeTone(0.0, 0.0), FeedbackFilter(0.0, 0.0), grid)
    with pytest.raises(GridError, match="resolution|resolve"):
        displacement_spectrum(tr, NoiseBudget(1.0))


def test_narrow_span_rejected(device):
    grid = FrequencyGrid.uniform(device.omega_m - 5 * device.gamma, device.omega_m + 5 * device.gamma, 2001)
    tr = solve_closed_loop(device, ProbeTone(0.0, 0.0), FeedbackFilter(0.0, 0.0), grid)
    with pytest.raises(GridError):
        occupation_numeric(displacement_spectrum(tr, NoiseBudget(1.0), check_grid=False),
                           momentum_spectrum(tr, NoiseBudget(1.0), check_grid=False))


def test_grid_must_increase():
    with pytest.raises(GridError):
        FrequencyGrid(np.array([0.0, 2.0, 1.0]))


def test_effective_parameters_match_peak_fit():
    dev = OpmDevice(1.0, 1e-5, 1.0, 1e3, 1e-3)
    G = 0.05
    phi = analytic.optimal_phase(dev.kappa, dev.omega_m)
    per = analytic.gamma_fb(G, 1.0, dev.kappa, dev.omega_m)
    for ratio in (1.0, 10.0, 100.0):
        filt = FeedbackFilter(ratio * dev.gamma / per, phi)
        eff = analytic.effective_params_resonant(dev, G, filt)
        tr = solve(dev, ProbeTone(0.0, G), filt)
        spec = displacement_spectrum(tr, NoiseBudget(10.0), check_grid=False)
        ge = eff.gamma_eff
        fit = fitting.fit_lorentzian(spec, (eff.omega_eff - 15 * ge, eff.omega_eff + 15 * ge))
        assert fit.center == pytest.approx(eff.omega_eff, abs=0.01 * ge)
        assert fit.fwhm == pytest.approx(ge, rel=0.01)


# -- stability ----------------------------------------------------------------


def test_blue_sideband_stability(device):
    G = hz(104e3)
    probe = ProbeTone(device.omega_m, G)
    phi = analytic.optimal_phase_blue(device.kappa, device.omega_m)
    assert not stability(device, probe, FeedbackFilter(0.0, phi))[0]
    ok, ge, _ = stability(device, probe, FeedbackFilter(hz(378e3), phi))
    assert ok
    assert to_hz(ge) == pytest.approx(5e3, rel=0.3)


def test_blue_boundary_matches_inversion(device):
    G = hz(104e3)
    probe = ProbeTone(device.omega_m, G)
    phi = analytic.optimal_phase_blue(device.kappa, device.omega_m)
    crit = analytic.critical_gain_blue(device, G)
    a = linsolve.find_stability_boundary(device, probe, phi, (0.5 * crit, 2 * crit))
    assert a == pytest.approx(crit, rel=1e-3)


def test_no_boundary_at_optimal_phase(device, phi_m):
    with pytest.raises(ValueError, match="no stability change"):
        linsolve.find_stability_boundary(device, ProbeTone(0.0, hz(427e3)), phi_m, (0.0, hz(500e3)))


def test_resonant_boundary_at_inverted_phase(device, phi_m):
    G = hz(427e3)
    a = linsolve.find_stability_boundary(device, ProbeTone(0.0, G), phi_m + math.pi, (0.0, hz(2e3)))
    expect = device.gamma * math.sqrt(device.kappa**2 + 4 * device.omega_m**2) / (4 * G)
    assert a == pytest.approx(expect, rel=1e-3)
