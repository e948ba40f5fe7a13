"""Spin-projection estimators for binned, time-resolved readout data.

Given calibration traces ``m0``/``m1`` (mean photons per bin per shot for the
two reference preparations) and a histogram ``n`` summed over ``N`` shots,
each bin has mean ``a + b * s_z`` with

    a = (N / 2) (m0 + m1),    b = (N / 2) (m0 - m1).

Three estimators are provided: the Gaussian-likelihood maximum (root of the
score function), its closed-form approximation with a fixed variance, and
plain photon counting over the first ``w`` bins.

Bins with ``a == 0`` carry no information and are dropped from every sum.
Estimates are never clipped to [-1, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from scipy.optimize import brentq

Method = Literal["exact_mle", "approx_mle", "photon_counting"]
METHODS: tuple[Method, ...] = ("exact_mle", "approx_mle", "photon_counting")

MAX_MEAN_PER_SHOT = 0.5


class EstimationError(ValueError):
    pass


class NoContrastError(EstimationError):
    """The calibration traces do not distinguish the two spin states."""


class NoRootError(EstimationError):
    """The likelihood score has no sign change in the search interval."""


@dataclass(frozen=True)
class CalibrationPair:
    """Reference traces for the pumped (``m0``) and pumped + pi (``m1``) states.

    ``n_cal`` is the number of shots the traces were averaged over, or
    ``None`` for noiseless (simulated) calibrations.
    """

    dt: float
    m0: np.ndarray
    m1: np.ndarray
    n_cal: int | None = None

    def __post_init__(self):
        m0 = np.asarray(self.m0, dtype=float)
        m1 = np.asarray(self.m1, dtype=float)
        if self.dt <= 0:
            raise ValueError(f"bin width must be positive, got {self.dt}")
        if m0.ndim != 1 or m0.shape != m1.shape:
            raise ValueError(f"m0 and m1 must be 1-d with equal length, got {m0.shape} and {m1.shape}")
        if m0.size == 0:
            raise ValueError("calibration has no bins")
        if not (np.all(np.isfinite(m0)) and np.all(np.isfinite(m1))):
            raise ValueError("calibration contains non-finite values")
        if np.any(m0 < 0) or np.any(m1 < 0):
            raise ValueError("calibration means must be non-negative")
        if np.any(m0 >= MAX_MEAN_PER_SHOT) or np.any(m1 >= MAX_MEAN_PER_SHOT):
            raise ValueError(
                f"calibration means must be per-shot values below {MAX_MEAN_PER_SHOT}"
            )
        if self.n_cal is not None and self.n_cal < 1:
            raise ValueError(f"n_cal must be >= 1, got {self.n_cal}")
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "m1", m1)

    @classmethod
    def from_traces(cls, ms0, ms1, n_cal: int | None = None) -> "CalibrationPair":
        if not np.isclose(ms0.dt, ms1.dt, rtol=1e-12, atol=0):
            raise ValueError("calibration traces have different bin widths")
        return cls(ms0.dt, ms0.bins, ms1.bins, n_cal)

    def __len__(self) -> int:
        return self.m0.size

    def truncated(self, n_bins: int) -> "CalibrationPair":
        return CalibrationPair(self.dt, self.m0[:n_bins], self.m1[:n_bins], self.n_cal)


@dataclass(frozen=True)
class HistogramData:
    """Photon counts per bin summed over ``n_meas`` readouts."""

    dt: float
    counts: np.ndarray
    n_meas: int

    def __post_init__(self):
        raw = np.asarray(self.counts)
        if raw.ndim != 1 or raw.size == 0:
            raise ValueError("counts must be a non-empty 1-d array")
        counts = raw.astype(np.int64)
        if not np.array_equal(counts, raw):
            raise ValueError("counts must be integers")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if self.n_meas < 1:
            raise ValueError(f"n_meas must be >= 1, got {self.n_meas}")
        if self.dt <= 0:
            raise ValueError(f"bin width must be positive, got {self.dt}")
        object.__setattr__(self, "counts", counts)

    def __len__(self) -> int:
        return self.counts.size


@dataclass
class EstimatorReport:
    s_z: float
    method: Method
    predicted_std: float
    window_bins: int | None = None
    n_meas: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def flip_probability(self) -> float:
        """p with s_z = 1 - 2p; unclipped, like ``s_z``."""
        return (1.0 - self.s_z) / 2.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["flip_probability"] = self.flip_probability
        if not out["extra"]:
            del out["extra"]
        return out


def _check_compatible(data: HistogramData, cal: CalibrationPair) -> None:
    if len(data) != len(cal):
        raise EstimationError(f"histogram has {len(data)} bins, calibration has {len(cal)}")
    if not np.isclose(data.dt, cal.dt, rtol=1e-9, atol=0):
        raise EstimationError(f"bin widths differ: {data.dt} vs {cal.dt}")


def weights(cal: CalibrationPair, n_meas: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin offset ``a`` and spin sensitivity ``b`` for ``n_meas`` shots.

    Bins where ``a == 0`` are returned as zeros; callers mask them with
    ``a > 0``.
    """
    if n_meas < 1:
        raise ValueError(f"n_meas must be >= 1, got {n_meas}")
    a = 0.5 * n_meas * (cal.m0 + cal.m1)
    b = 0.5 * n_meas * (cal.m0 - cal.m1)
    return a, b


def _used(a: np.ndarray, b: np.ndarray):
    used = a > 0
    return a[used], b[used], used


def _fisher(a: np.ndarray, b: np.ndarray) -> float:
    info = float(np.sum(b * b / a))
    if info <= 0:
        raise NoContrastError("calibration has no spin contrast (sum b^2/a = 0)")
    return info


# -- approximate MLE ---------------------------------------------------------

def approx_mle_counts(counts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Closed-form estimate for one histogram or a stack of them (last axis = bins)."""
    a, b, used = _used(a, b)
    info = _fisher(a, b)
    n = np.asarray(counts, dtype=float)[..., used]
    return ((n - a) @ (b / a)) / info


def approx_variance_ab(a: np.ndarray, b: np.ndarray, s_z: float) -> float:
    a, b, _ = _used(a, b)
    info = _fisher(a, b)
    # the mixture mean a + b s is only physical for s in [-1, 1]
    s = min(max(s_z, -1.0), 1.0)
    return float(np.sum((b / a) ** 2 * (a + b * s))) / info**2


def predicted_variance_approx(cal: CalibrationPair, n_meas: int, s_z: float) -> float:
    """Shot-noise variance of the approximate MLE at spin projection ``s_z``."""
    return approx_variance_ab(*weights(cal, n_meas), s_z)


def estimate_approx_mle(data: HistogramData, cal: CalibrationPair) -> EstimatorReport:
    _check_compatible(data, cal)
    a, b = weights(cal, data.n_meas)
    s = float(approx_mle_counts(data.counts, a, b))
    std = np.sqrt(approx_variance_ab(a, b, s))
    return EstimatorReport(s, "approx_mle", float(std), n_meas=data.n_meas)


# -- exact (Gaussian-likelihood) MLE -----------------------------------------

def mle_score(s_z, counts: np.ndarray, a: np.ndarray, b: np.ndarray):
    """d(-ln P)/d s_z for the Gaussian likelihood with variance equal to mean.

    ``a`` and ``b`` must already be restricted to informative bins.
    """
    n = np.asarray(counts, dtype=float)
    mu = a + b * s_z
    return float(np.sum(0.5 * b * (1.0 + (mu - n * n) / (mu * mu))))


def neg_log_likelihood(s_z: float, counts: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    n = np.asarray(counts, dtype=float)
    mu = a + b * s_z
    return float(np.sum(0.5 * np.log(2 * np.pi * mu) + (n - mu) ** 2 / (2 * mu)))


def _domain(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Open interval of s_z on which every bin mean stays positive."""
    lo, hi = -np.inf, np.inf
    pos, neg = b > 0, b < 0
    if np.any(pos):
        lo = float(np.max(-a[pos] / b[pos]))
    if np.any(neg):
        hi = float(np.min(-a[neg] / b[neg]))
    return lo, hi


def _bracket(score, a, b, half_width: float):
    dom_lo, dom_hi = _domain(a, b)
    margin = 1e-9
    lo = max(-half_width, dom_lo + margin * max(1.0, abs(dom_lo)))
    hi = min(half_width, dom_hi - margin * max(1.0, abs(dom_hi)))
    if lo >= hi:
        return None
    f_lo, f_hi = score(lo), score(hi)
    if np.sign(f_lo) == np.sign(f_hi) and f_lo != 0:
        return None
    return lo, hi


def exact_mle_counts(counts: np.ndarray, a: np.ndarray, b: np.ndarray, xtol: float = 1e-12) -> float:
    """Root of the likelihood score for a single histogram."""
    a, b, used = _used(a, b)
    if not np.any(b != 0):
        raise NoContrastError("calibration has no spin contrast (all b = 0)")
    n = np.asarray(counts, dtype=float)[used]

    def score(s):
        return mle_score(s, n, a, b)

    bracket = _bracket(score, a, b, 1.5) or _bracket(score, a, b, 3.0)
    if bracket is None:
        raise NoRootError("likelihood score does not change sign on [-3, 3]")
    return float(brentq(score, *bracket, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500))


def estimate_exact_mle(data: HistogramData, cal: CalibrationPair) -> EstimatorReport:
    _check_compatible(data, cal)
    a, b = weights(cal, data.n_meas)
    s = exact_mle_counts(data.counts, a, b)
    std = np.sqrt(approx_variance_ab(a, b, s))
    return EstimatorReport(s, "exact_mle", float(std), n_meas=data.n_meas)


# -- photon counting ---------------------------------------------------------

def _check_window(window_bins: int, n_bins: int) -> None:
    if not 1 <= window_bins <= n_bins:
        raise EstimationError(f"window must be within 1..{n_bins} bins, got {window_bins}")


def photon_counting_counts(counts: np.ndarray, m0: np.ndarray, m1: np.ndarray,
                           n_meas: int, window_bins: int) -> np.ndarray:
    """Photon-counting estimate for one histogram or a stack (last axis = bins)."""
    eta0 = n_meas * float(np.sum(m0[:window_bins]))
    eta1 = n_meas * float(np.sum(m1[:window_bins]))
    if eta0 == eta1:
        raise NoContrastError("reference counts are equal inside the window")
    eta = np.sum(np.asarray(counts, dtype=float)[..., :window_bins], axis=-1)
    return 2.0 * (eta - eta1) / (eta0 - eta1) - 1.0


def predicted_variance_counting(cal: CalibrationPair, n_meas: int, window_bins: int, s_z: float) -> float:
    """Shot-noise variance of the photon-counting estimate at ``s_z``."""
    _check_window(window_bins, len(cal))
    a, b = weights(cal, n_meas)
    sum_b = float(np.sum(b[:window_bins]))
    if sum_b == 0:
        raise NoContrastError("reference counts are equal inside the window")
    s = min(max(s_z, -1.0), 1.0)
    return float(np.sum(a[:window_bins] + b[:window_bins] * s)) / sum_b**2


def estimate_photon_counting(data: HistogramData, cal: CalibrationPair, window_bins: int) -> EstimatorReport:
    _check_compatible(data, cal)
    _check_window(window_bins, len(cal))
    s = float(photon_counting_counts(data.counts, cal.m0, cal.m1, data.n_meas, window_bins))
    std = np.sqrt(predicted_variance_counting(cal, data.n_meas, window_bins, s))
    return EstimatorReport(s, "photon_counting", float(std), window_bins=window_bins,
                           n_meas=data.n_meas)


# -- signal to noise ---------------------------------------------------------

def snr_approx(cal: CalibrationPair, n_meas: int = 1) -> float:
    """Full swing (2) over the s_z-averaged std of the approximate MLE."""
    total = cal.m0 + cal.m1
    used = total > 0
    diff = cal.m0[used] - cal.m1[used]
    info = float(np.sum(diff**2 / total[used]))
    if info == 0:
        raise NoContrastError("calibration has no spin contrast")
    return float(np.sqrt(2.0 * n_meas * info))


def snr_counting_curve(cal: CalibrationPair, n_meas: int = 1) -> np.ndarray:
    """Photon-counting SNR for every window length 1..len(cal).

    Windows that contain no photons at all get ``-inf``.
    """
    diff = np.cumsum(cal.m0 - cal.m1)
    total = np.cumsum(cal.m0 + cal.m1)
    curve = np.full(diff.shape, -np.inf)
    ok = total > 0
    curve[ok] = np.sqrt(2.0 * n_meas) * diff[ok] / np.sqrt(total[ok])
    return curve


def snr_photon_counting(cal: CalibrationPair, n_meas: int = 1, window_bins: int | None = None) -> float:
    if window_bins is None:
        window_bins = optimal_window(cal, n_meas)
    _check_window(window_bins, len(cal))
    diff = float(np.sum(cal.m0[:window_bins] - cal.m1[:window_bins]))
    total = float(np.sum(cal.m0[:window_bins] + cal.m1[:window_bins]))
    if diff == 0 or total == 0:
        raise NoContrastError("reference counts are equal inside the window")
    return float(np.sqrt(2.0 * n_meas) * diff / np.sqrt(total))


def optimal_window(cal: CalibrationPair, n_meas: int = 1) -> int:
    """Window length (bins) maximizing the photon-counting SNR; ties go short."""
    curve = snr_counting_curve(cal, n_meas)
    if not np.any(np.isfinite(curve)) or np.nanmax(curve) <= 0:
        raise NoContrastError("no counting window shows positive contrast")
    return int(np.argmax(curve)) + 1


def estimate_all(data: HistogramData, cal: CalibrationPair,
                 window_bins: int | None = None) -> dict[str, EstimatorReport]:
    """Run all three estimators; ``window_bins=None`` picks the optimal window."""
    if window_bins is None:
        window_bins = optimal_window(cal, data.n_meas)
    return {
        "exact_mle": estimate_exact_mle(data, cal),
        "approx_mle": estimate_approx_mle(data, cal),
        "photon_counting": estimate_photon_counting(data, cal, window_bins),
    }
