"""Time-resolved NV spin readout: rate-model simulation, spin-projection
estimators, Monte Carlo benchmarks and multi-intensity model fits."""

from .estimators import (
    CalibrationPair,
    EstimatorReport,
    HistogramData,
    estimate_all,
    estimate_approx_mle,
    estimate_exact_mle,
    estimate_photon_counting,
    optimal_window,
    snr_approx,
    snr_photon_counting,
)
from .photophysics import PRESETS, FluorescenceTrace, Populations, RateModel, preset

__version__ = "0.1.0"
