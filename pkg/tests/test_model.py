import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from optofeedback.model import (
    FeedbackChain, FeedbackFilter, NoiseBudget, OpmDevice, ParameterError, ProbeTone,
    effective_coupling, hz, reference_device, photon_number, to_hz, validate_device,
)


def test_reference_device_is_valid(device):
    assert validate_device(device) is device
    assert to_hz(device.omega_m) == pytest.approx(8.14e6, rel=1e-15)
    assert to_hz(device.gamma) == pytest.approx(76.0, rel=1e-15)


def test_zero_damping_rejected():
    with pytest.raises(ParameterError, match="gamma must be positive"):
        validate_device(OpmDevice(hz(8.14e6), 0.0, hz(8.5e6), hz(5.35e9), hz(130)))


def test_damping_too_large_rejected():
    with pytest.raises(ParameterError, match="gamma < omega_m/10 violated"):
        validate_device(OpmDevice(hz(8.14e6), hz(2e6), hz(8.5e6), hz(5.35e9), hz(130)))


def test_all_violations_reported():
    bad = OpmDevice(-1.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(ParameterError) as exc:
        validate_device(bad)
    assert len(exc.value.problems) >= 3


def test_effective_coupling_trivial_cases():
    assert effective_coupling(hz(130), 0) == 0
    assert effective_coupling(hz(130), 1) == pytest.approx(hz(130))
    with pytest.raises(ParameterError):
        effective_coupling(1.0, -1.0)


def test_photon_number_for_operating_coupling():
    # (420 kHz / 130 Hz)^2, evaluated with mpmath
    assert photon_number(hz(130), hz(420e3)) == pytest.approx(10437869.8224852, rel=1e-12)


@given(st.floats(1e-3, 1e6), st.floats(1e-6, 1e9))
def test_coupling_round_trip(g0, G):
    assert effective_coupling(g0, (G / g0) ** 2) == pytest.approx(G, rel=1e-12)


@given(st.floats(-1e10, 1e10, allow_nan=False))
def test_hz_round_trip(f):
    assert to_hz(hz(f)) == pytest.approx(f, rel=1e-15, abs=1e-300)


def test_probe_photon_consistency(device):
    p = ProbeTone.from_photons(device, 0.0, 1.2e7)
    p.check(device)
    with pytest.raises(ParameterError, match="inconsistent"):
        ProbeTone(0.0, p.coupling * 1.001, 1.2e7).check(device)
    with pytest.raises(ParameterError):
        ProbeTone(0.0, -1.0)


def test_filter_and_noise_invariants():
    with pytest.raises(ParameterError):
        FeedbackFilter(-1.0, 0.0)
    with pytest.raises(ParameterError):
        NoiseBudget(-0.1)
    f = FeedbackFilter(2.0, math.radians(-30))
    assert f.phase_deg == pytest.approx(330.0)
    wm = 3.0
    assert f.response(wm, wm) == pytest.approx(2.0 * np.exp(-1j * f.phase))


def test_chain_detuning_warning(device):
    with pytest.warns(UserWarning, match="overlap"):
        FeedbackChain(hz(10e6), 1.0, 1.0).check(device)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        FeedbackChain(hz(-20e6), 1.0, 1.0).check(device)


def test_values_are_immutable():
    d = reference_device()
    with pytest.raises(AttributeError):
        d.gamma = 1.0
