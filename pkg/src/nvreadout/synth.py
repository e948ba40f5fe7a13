"""Synthetic histograms and Monte Carlo estimator benchmarks.

Random streams are Philox counter-based generators keyed by
``(seed, *index)`` through :class:`numpy.random.SeedSequence`, so every
repetition owns an independent stream and a run split over threads
reproduces a serial run exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import photophysics as pp
from .estimators import CalibrationPair, HistogramData

DEFAULT_N_MEAS = 100_000
DEFAULT_REPETITIONS = 1000
DEFAULT_T_PI = 91.7
DEFAULT_TRACE_BINS = 360


def stream(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, *index)``."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class MixtureSpec:
    p_flip: float
    n_meas: int
    seed: int = 0
    background: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError(f"p_flip must lie in [0, 1], got {self.p_flip}")
        if self.n_meas < 1:
            raise ValueError(f"n_meas must be >= 1, got {self.n_meas}")
        if self.background < 0:
            raise ValueError(f"background must be >= 0, got {self.background}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def s_z(self) -> float:
        return 1.0 - 2.0 * self.p_flip


def expected_bins(cal: CalibrationPair, spec: MixtureSpec) -> np.ndarray:
    """Mean total counts per bin for a spin mixture."""
    m = cal.m0 * (1.0 - spec.p_flip) + cal.m1 * spec.p_flip + spec.background
    return spec.n_meas * m


def sample_histogram(cal: CalibrationPair, spec: MixtureSpec, repetition: int = 0) -> HistogramData:
    """Poisson draw of one histogram; ``repetition`` selects the stream."""
    mu = expected_bins(cal, spec)
    counts = stream(spec.seed, repetition).poisson(mu)
    return HistogramData(cal.dt, counts, spec.n_meas)


def simulated_calibration(
    model: pp.RateModel,
    n_bins: int = DEFAULT_TRACE_BINS,
    dt: float = pp.DEFAULT_BIN_NS,
    n_cal: int | None = None,
    seed: int = 0,
) -> CalibrationPair:
    """Calibration traces from the rate model.

    With ``n_cal`` set, each trace is replaced by a Poisson-sampled average
    over ``n_cal`` shots, for studying finite calibration statistics.
    """
    ms0 = pp.fluorescence_trace(model, "ms0", n_bins, dt)
    ms1 = pp.fluorescence_trace(model, "ms1", n_bins, dt)
    if n_cal is None:
        return CalibrationPair.from_traces(ms0, ms1)
    rng = stream(seed, 2**32 - 1)
    m0 = rng.poisson(n_cal * ms0.bins) / n_cal
    m1 = rng.poisson(n_cal * ms1.bins) / n_cal
    return CalibrationPair(dt, m0, m1, n_cal)


# -- Monte Carlo ---------------------------------------------------------------

@dataclass
class MethodStats:
    mean: float
    std: float
    predicted_std: float


@dataclass
class MonteCarloResult:
    p_flip: float
    repetitions: int
    n_meas: int
    window_bins: int
    stats: dict[str, MethodStats]
    metadata: dict = field(default_factory=dict)
    estimates: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def s_z_true(self) -> float:
        return 1.0 - 2.0 * self.p_flip

    def rows(self) -> list[dict]:
        """One flat record per method, for CSV output."""
        out = []
        for method, st in self.stats.items():
            row = dict(self.metadata)
            row.update(
                method=method,
                p_flip=self.p_flip,
                s_z_true=self.s_z_true,
                mean=st.mean,
                std=st.std,
                predicted_std=st.predicted_std,
                repetitions=self.repetitions,
                n_meas=self.n_meas,
                window_bins=self.window_bins,
            )
            out.append(row)
        return out


def _sample_block(mu: np.ndarray, seed: int, point: int, reps: range) -> np.ndarray:
    return np.stack([stream(seed, point, r).poisson(mu) for r in reps])


def sample_ensemble(
    cal: CalibrationPair,
    spec: MixtureSpec,
    repetitions: int,
    point: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Histograms for ``repetitions`` independent experiments, shape (reps, bins)."""
    mu = expected_bins(cal, spec)
    if workers <= 1 or repetitions < 2 * workers:
        return _sample_block(mu, spec.seed, point, range(repetitions))
    size = math.ceil(repetitions / workers)
    blocks = [range(i, min(i + size, repetitions)) for i in range(0, repetitions, size)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda r: _sample_block(mu, spec.seed, point, r), blocks))
    return np.concatenate(parts)


def estimate_ensemble(
    counts: np.ndarray,
    cal: CalibrationPair,
    n_meas: int,
    window_bins: int,
    methods=est.METHODS,
) -> dict[str, np.ndarray]:
    a, b = est.weights(cal, n_meas)
    out = {}
    if "exact_mle" in methods:
        out["exact_mle"] = np.array([est.exact_mle_counts(row, a, b) for row in counts])
    if "approx_mle" in methods:
        out["approx_mle"] = est.approx_mle_counts(counts, a, b)
    if "photon_counting" in methods:
        out["photon_counting"] = est.photon_counting_counts(counts, cal.m0, cal.m1, n_meas, window_bins)
    return out


def predicted_std(method: str, cal: CalibrationPair, n_meas: int, window_bins: int, s_z: float) -> float:
    if method == "photon_counting":
        return math.sqrt(est.predicted_variance_counting(cal, n_meas, window_bins, s_z))
    return math.sqrt(est.predicted_variance_approx(cal, n_meas, s_z))


def monte_carlo(
    cal: CalibrationPair,
    spec: MixtureSpec,
    repetitions: int,
    window_bins: int | None = None,
    point: int = 0,
    methods=est.METHODS,
    workers: int = 1,
    keep_estimates: bool = False,
    metadata: dict | None = None,
) -> MonteCarloResult:
    """Repeat an ``spec.n_meas``-shot experiment and summarize each estimator."""
    if repetitions < 2:
        raise ValueError("need at least two repetitions for a spread")
    if window_bins is None:
        window_bins = est.optimal_window(cal, spec.n_meas)
    counts = sample_ensemble(cal, spec, repetitions, point, workers)
    estimates = estimate_ensemble(counts, cal, spec.n_meas, window_bins, methods)
    stats = {
        m: MethodStats(
            mean=float(np.mean(x)),
            std=float(np.std(x, ddof=1)),
            predicted_std=predicted_std(m, cal, spec.n_meas, window_bins, spec.s_z),
        )
        for m, x in estimates.items()
    }
    return MonteCarloResult(
        p_flip=spec.p_flip,
        repetitions=repetitions,
        n_meas=spec.n_meas,
        window_bins=window_bins,
        stats=stats,
        metadata=dict(metadata or {}),
        estimates=estimates if keep_estimates else None,
    )


def rabi_flip_probability(duration: float, t_pi: float) -> float:
    return math.sin(math.pi * duration / (2.0 * t_pi)) ** 2


def rabi_sweep(
    cal: CalibrationPair,
    t_pi: float = DEFAULT_T_PI,
    durations=None,
    n_meas: int = DEFAULT_N_MEAS,
    repetitions: int = DEFAULT_REPETITIONS,
    seed: int = 0,
    window_bins: int | None = None,
    workers: int = 1,
    keep_estimates: bool = False,
) -> list[MonteCarloResult]:
    """Monte Carlo over microwave durations with p_flip = sin^2(pi t / 2 t_pi)."""
    if t_pi <= 0:
        raise ValueError(f"t_pi must be positive, got {t_pi}")
    if durations is None:
        durations = np.linspace(0.0, 2.0 * t_pi, 17)
    if window_bins is None:
        window_bins = est.optimal_window(cal, n_meas)
    results = []
    for k, t in enumerate(durations):
        spec = MixtureSpec(rabi_flip_probability(float(t), t_pi), n_meas, seed)
        results.append(
            monte_carlo(cal, spec, repetitions, window_bins, point=k, workers=workers,
                        keep_estimates=keep_estimates, metadata={"duration_ns": float(t)})
        )
    return results


def std_ratio(results: list[MonteCarloResult], numerator: str, denominator: str) -> float:
    """Sweep-averaged ratio of empirical standard deviations."""
    return float(np.mean([r.stats[numerator].std / r.stats[denominator].std for r in results]))


@dataclass
class SnrPoint:
    intensity: float
    rate: float
    snr_approx: float
    snr_counting: float
    window_bins: int

    @property
    def percent_gap(self) -> float:
        return 100.0 * (self.snr_approx / self.snr_counting - 1.0)

    def row(self) -> dict:
        return {
            "intensity": self.intensity,
            "R_MHz": self.rate,
            "snr_approx": self.snr_approx,
            "snr_counting": self.snr_counting,
            "window_bins": self.window_bins,
            "percent_gap": self.percent_gap,
        }


def snr_intensity_sweep(
    model: pp.RateModel,
    intensities,
    trace_bins: int = DEFAULT_TRACE_BINS,
    dt: float = pp.DEFAULT_BIN_NS,
) -> list[SnrPoint]:
    """Single-shot (N = 1) SNR of both estimators versus laser intensity."""
    r_sat = pp.saturation_rate(model)
    points = []
    for intensity in intensities:
        if intensity <= 0:
            raise ValueError(f"intensities must be positive, got {intensity}")
        m = model.with_rate(intensity * r_sat)
        cal = simulated_calibration(m, trace_bins, dt)
        window = est.optimal_window(cal, 1)
        points.append(
            SnrPoint(
                intensity=float(intensity),
                rate=m.R,
                snr_approx=est.snr_approx(cal, 1),
                snr_counting=est.snr_photon_counting(cal, 1, window),
                window_bins=window,
            )
        )
    return points
