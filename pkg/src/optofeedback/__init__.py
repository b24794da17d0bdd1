"""Closed-loop feedback cooling of an optomechanical oscillator: frequency-domain
solver, closed forms, time-domain oracle and calibration fitters."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    FeedbackChain, FeedbackFilter, NoiseBudget, OpmDevice, ParameterError, ProbeTone,
    hz, reference_device, reference_noise, to_hz,
)
