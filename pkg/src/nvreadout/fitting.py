"""Simultaneous least-squares fits of the rate model to readout traces.

All datasets share gamma, S0, S1, D0, D1 and the detection scale eta; each
dataset (one laser intensity) gets its own excitation rate R.  Measured
excited-state lifetimes enter either as penalty residuals (``"soft"``) or
by eliminating S0 and S1 (``"hard"``).  Rates are fitted in log space,
which keeps them positive without bound handling.  In hard mode gamma goes
through a logistic map onto (0, 1/t) instead, so S0 and S1 stay positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import photophysics as pp
from .photophysics import FluorescenceTrace, RateModel

SHARED = ("gamma", "S0", "S1", "D0", "D1", "eta")
RATES = ("gamma", "S0", "S1", "D0", "D1")

DEFAULT_GUESS = {"gamma": 66.0, "S0": 10.0, "S1": 90.0, "D0": 5.0, "D1": 2.0}

Weighting = Literal["poisson", "uniform"]


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitDataset:
    """Averaged readout traces at one laser intensity.

    ``n_avg`` is the number of shots behind each mean; it sets the Poisson
    weights.
    """

    intensity: float
    ms0: FluorescenceTrace
    ms1: FluorescenceTrace
    n_avg: float = 3e7
    label: str = ""

    def __post_init__(self):
        if len(self.ms0) != len(self.ms1):
            raise ValueError("ms0 and ms1 traces differ in length")
        if not math.isclose(self.ms0.dt, self.ms1.dt, rel_tol=1e-12):
            raise ValueError("ms0 and ms1 traces differ in bin width")
        if self.n_avg <= 0:
            raise ValueError("n_avg must be positive")

    @property
    def n_bins(self) -> int:
        return len(self.ms0)

    @property
    def dt(self) -> float:
        return self.ms0.dt


@dataclass(frozen=True)
class LifetimeConstraint:
    """Independently measured excited-state lifetimes (ns) and their errors."""

    t0: float
    sigma_t0: float
    t1: float
    sigma_t1: float

    def __post_init__(self):
        if min(self.t0, self.sigma_t0, self.t1, self.sigma_t1) <= 0:
            raise ValueError("lifetimes and their uncertainties must be positive")


@dataclass
class FitProblem:
    datasets: Sequence[FitDataset]
    constraints: LifetimeConstraint | None = None
    weighting: Weighting = "poisson"
    lifetime_mode: Literal["soft", "hard"] = "soft"
    fit_background: bool = False
    dt_solver: float = pp.DEFAULT_DT_SOLVER

    def __post_init__(self):
        self.datasets = list(self.datasets)
        if not self.datasets:
            raise ValueError("a fit needs at least one dataset")
        dt = self.datasets[0].dt
        if any(not math.isclose(d.dt, dt, rel_tol=1e-12) for d in self.datasets):
            raise ValueError("all traces must share one bin width")
        if self.weighting not in ("poisson", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.lifetime_mode not in ("soft", "hard"):
            raise ValueError(f"unknown lifetime mode {self.lifetime_mode!r}")
        if self.lifetime_mode == "hard" and self.constraints is None:
            raise ValueError("hard lifetime mode needs measured lifetimes")
        self._sigma = [self._bin_sigma(d) for d in self.datasets]

    # parameter bookkeeping

    @property
    def free_shared(self) -> tuple[str, ...]:
        if self.lifetime_mode == "hard":
            return tuple(p for p in SHARED if p not in ("S0", "S1"))
        return SHARED

    @property
    def parameter_names(self) -> list[str]:
        names = list(self.free_shared)
        names += [f"R_{k}" for k in range(len(self.datasets))]
        if self.fit_background:
            names += [f"bg_{k}" for k in range(len(self.datasets))]
        return names

    @property
    def gamma_max(self) -> float:
        """Upper limit on gamma in hard mode (both S0 and S1 must stay positive)."""
        c = self.constraints
        return 1e3 / max(c.t0, c.t1)

    def pack(self, params: dict) -> np.ndarray:
        """Physical parameter dict -> internal vector (log rates, linear backgrounds).

        In hard mode a gamma guess at or above the lifetime limit is moved
        to 90% of it.
        """
        theta = []
        for name in self.parameter_names:
            value = float(params.get(name, 0.0 if name.startswith("bg_") else np.nan))
            if name.startswith("bg_"):
                theta.append(value)
                continue
            if not value > 0:
                raise FitError(f"parameter {name} must be positive, got {value}")
            if name == "gamma" and self.lifetime_mode == "hard":
                x = min(value / self.gamma_max, 0.9)
                theta.append(math.log(x / (1.0 - x)))
            else:
                theta.append(math.log(value))
        return np.array(theta)

    def unpack(self, theta: np.ndarray) -> dict:
        params = {}
        for name, value in zip(self.parameter_names, theta):
            if name.startswith("bg_"):
                params[name] = float(value)
            elif name == "gamma" and self.lifetime_mode == "hard":
                params[name] = self.gamma_max / (1.0 + math.exp(-value))
            else:
                params[name] = math.exp(value)
        if self.lifetime_mode == "hard":
            c = self.constraints
            params["S0"] = 1e3 / c.t0 - params["gamma"]
            params["S1"] = 1e3 / c.t1 - params["gamma"]
        return params

    # residuals

    def _bin_sigma(self, d: FitDataset) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for trace in (d.ms0, d.ms1):
            counts = trace.bins * d.n_avg
            if self.weighting == "poisson":
                sigma = np.sqrt(np.maximum(counts, 1.0)) / d.n_avg
            else:
                sigma = np.full(counts.shape, math.sqrt(max(counts.mean(), 1.0)) / d.n_avg)
            out.append(sigma)
        return out[0], out[1]

    def model_traces(self, params: dict, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Predicted ms0/ms1 traces for dataset ``k``."""
        d = self.datasets[k]
        model = RateModel(
            R=params[f"R_{k}"],
            gamma=params["gamma"],
            S0=params["S0"],
            S1=params["S1"],
            D0=params["D0"],
            D1=params["D1"],
        )
        init = pp.pumped_initial_condition(model, self.dt_solver)
        bg = params.get(f"bg_{k}", 0.0)
        ms0 = pp.trace_from(model, init, d.n_bins, d.dt, self.dt_solver).bins
        ms1 = pp.trace_from(model, init.spin_flipped(), d.n_bins, d.dt, self.dt_solver).bins
        return params["eta"] * ms0 + bg, params["eta"] * ms1 + bg

    def residual_blocks(self, params: dict) -> list[np.ndarray]:
        """Weighted residuals per dataset (ms0 then ms1, concatenated)."""
        for name in RATES + ("eta",):
            if not params[name] >= 0:
                raise FitError(f"parameter {name} out of bounds: {params[name]}")
        blocks = []
        for k, d in enumerate(self.datasets):
            p0, p1 = self.model_traces(params, k)
            s0, s1 = self._sigma[k]
            blocks.append(np.concatenate([(d.ms0.bins - p0) / s0, (d.ms1.bins - p1) / s1]))
        return blocks

    def constraint_residuals(self, params: dict) -> np.ndarray:
        if self.constraints is None or self.lifetime_mode == "hard":
            return np.zeros(0)
        c = self.constraints
        t0 = 1e3 / (params["gamma"] + params["S0"])
        t1 = 1e3 / (params["gamma"] + params["S1"])
        return np.array([(t0 - c.t0) / c.sigma_t0, (t1 - c.t1) / c.sigma_t1])

    def residual_vector(self, theta: np.ndarray) -> np.ndarray:
        params = self.unpack(theta)
        return np.concatenate(self.residual_blocks(params) + [self.constraint_residuals(params)])

    def initial_theta(self, guess: dict | None = None) -> np.ndarray:
        """Fill missing guesses: defaults for rates, R from intensity, eta from data scale."""
        params = dict(DEFAULT_GUESS)
        params.update(guess or {})
        base = RateModel(R=0.0, **{k: params[k] for k in RATES})
        r_sat = pp.saturation_rate(base)
        for k, d in enumerate(self.datasets):
            params.setdefault(f"R_{k}", max(d.intensity, 1e-3) * r_sat)
        if "eta" not in params:
            params["eta"] = 1.0
            ratios = []
            for k, d in enumerate(self.datasets):
                p0, p1 = self.model_traces(params, k)
                ratios.append((d.ms0.bins.sum() + d.ms1.bins.sum()) / (p0.sum() + p1.sum()))
            params["eta"] = float(np.mean(ratios))
        return self.pack(params)


def residuals(problem: FitProblem, params: dict) -> np.ndarray:
    """Weighted data residuals for every dataset, then the lifetime penalties."""
    full = dict(params)
    if problem.lifetime_mode == "hard":
        c = problem.constraints
        full["S0"] = 1e3 / c.t0 - full["gamma"]
        full["S1"] = 1e3 / c.t1 - full["gamma"]
    return np.concatenate(problem.residual_blocks(full) + [problem.constraint_residuals(full)])


# -- Levenberg-Marquardt -----------------------------------------------------

@dataclass
class FitResult:
    params: dict[str, float]
    stderr: dict[str, float]
    reduced_chi2: float
    chi2: float
    dof: int
    converged: bool
    iterations: int
    message: str
    theta: np.ndarray = field(repr=False)
    covariance: np.ndarray = field(repr=False)
    parameter_names: list[str] = field(default_factory=list)
    # d(physical parameter)/d(theta) for every entry of ``params``
    sensitivity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    singular: bool = False
    weighting: str = "poisson"

    def rate_model(self, k: int | None = None) -> RateModel:
        R = self.params[f"R_{k}"] if k is not None else 0.0
        return RateModel(R=R, **{n: self.params[n] for n in RATES})

    def derived(self) -> dict[str, tuple[float, float]]:
        """Lifetimes (ns) with delta-method errors from the parameter covariance."""
        p, sens = self.params, self.sensitivity
        out = {}
        for key, (a, b) in {"t0": ("gamma", "S0"), "t1": ("gamma", "S1"), "ts": ("D0", "D1")}.items():
            total = p[a] + p[b]
            g = -1e3 / total**2 * (sens[a] + sens[b])
            out[key] = (1e3 / total, float(math.sqrt(max(g @ self.covariance @ g, 0.0))))
        return out

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "stderr": self.stderr,
            "derived": {k: {"value": v, "stderr": e} for k, (v, e) in self.derived().items()},
            "reduced_chi2": self.reduced_chi2,
            "chi2": self.chi2,
            "dof": self.dof,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "singular_jacobian": self.singular,
            "weighting": self.weighting,
        }


def jacobian(fun, theta: np.ndarray, r0: np.ndarray, rel_step: float = 1e-6,
             central: bool = False) -> np.ndarray:
    """Finite-difference Jacobian; steps are ``rel_step * max(|theta_j|, 1)``."""
    J = np.empty((r0.size, theta.size))
    for j in range(theta.size):
        h = rel_step * max(abs(theta[j]), 1.0)
        up = theta.copy()
        up[j] += h
        if central:
            down = theta.copy()
            down[j] -= h
            J[:, j] = (fun(up) - fun(down)) / (2 * h)
        else:
            J[:, j] = (fun(up) - r0) / h
    return J


def levenberg_marquardt(
    fun,
    theta0: np.ndarray,
    max_iter: int = 500,
    ftol: float = 1e-10,
    xtol: float = 1e-10,
    rel_step: float = 1e-6,
    lam0: float = 1e-3,
):
    """Minimize ``0.5 * |fun(theta)|^2`` by damped Gauss-Newton.

    Returns ``(theta, residual, J, iterations, converged, message)`` where
    ``J`` is evaluated at the returned point.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    r = fun(theta)
    cost = 0.5 * float(r @ r)
    lam = lam0
    J = jacobian(fun, theta, r, rel_step)
    for it in range(1, max_iter + 1):
        g = J.T @ r
        H = J.T @ J
        diag = np.maximum(np.diag(H), 1e-300)
        while True:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(H + lam * np.diag(diag), g, rcond=None)[0]
            trial = theta + step
            try:
                r_new = fun(trial)
                new_cost = 0.5 * float(r_new @ r_new)
            except (FitError, pp.ModelError, FloatingPointError):
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost <= cost:
                break
            lam *= 4.0
            if lam > 1e16:
                return theta, r, J, it, True, "no further decrease possible"
        rel_change = (cost - new_cost) / max(cost, 1e-300)
        step_norm = float(np.linalg.norm(step))
        theta, r, cost = trial, r_new, new_cost
        lam = max(lam / 3.0, 1e-12)
        J = jacobian(fun, theta, r, rel_step)
        if rel_change < ftol:
            return theta, r, J, it, True, "relative cost change below tolerance"
        if step_norm < xtol * (1.0 + float(np.linalg.norm(theta))):
            return theta, r, J, it, True, "step size below tolerance"
    return theta, r, J, max_iter, False, "maximum iterations reached"


def _sensitivity(problem: FitProblem, theta: np.ndarray, params: dict, h: float = 1e-7) -> dict:
    """Central-difference derivatives of each physical parameter w.r.t. theta."""
    cols = []
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        pu, pd = problem.unpack(up), problem.unpack(down)
        cols.append({k: (pu[k] - pd[k]) / (2 * h) for k in params})
    return {k: np.array([c[k] for c in cols]) for k in params}


def fit(problem: FitProblem, initial_guess: dict | None = None, max_iter: int = 500) -> FitResult:
    """Fit all datasets at once; standard errors from (J^T J)^+ times reduced chi-square."""
    theta0 = problem.initial_theta(initial_guess)
    theta, r, J, iters, converged, message = levenberg_marquardt(
        problem.residual_vector, theta0, max_iter=max_iter
    )
    names = problem.parameter_names
    chi2 = float(r @ r)
    dof = max(r.size - theta.size, 1)
    red = chi2 / dof
    JTJ = J.T @ J
    singular = bool(np.linalg.cond(JTJ) > 1e14)
    if singular:
        message += "; Jacobian is singular, errors unreliable"
    cov = np.linalg.pinv(JTJ) * red
    params = problem.unpack(theta)
    sensitivity = _sensitivity(problem, theta, params)
    stderr = {
        name: float(math.sqrt(max(d @ cov @ d, 0.0))) for name, d in sensitivity.items()
    }
    return FitResult(
        params=params,
        stderr=stderr,
        reduced_chi2=red,
        chi2=chi2,
        dof=dof,
        converged=converged,
        iterations=iters,
        message=message,
        theta=theta,
        covariance=cov,
        parameter_names=names,
        sensitivity=sensitivity,
        singular=singular,
        weighting=problem.weighting,
    )


# -- reporting ---------------------------------------------------------------

def goodness_report(result: FitResult, problem: FitProblem, nested: FitResult | None = None) -> dict:
    """Reduced chi-square per dataset and overall, plus a parameter drift table.

    ``nested`` is a fit of a subset of the datasets (typically the low
    intensities); the drift table lists how far each shared parameter moves
    between the two fits in units of the combined standard error.
    """
    blocks = problem.residual_blocks(result.params)
    per_dataset = []
    for d, block in zip(problem.datasets, blocks):
        per_dataset.append(
            {"intensity": d.intensity, "label": d.label, "reduced_chi2": float(block @ block) / block.size}
        )
    report = {"overall_reduced_chi2": result.reduced_chi2, "datasets": per_dataset, "weighting": problem.weighting}
    if nested is not None:
        drift = []
        for name in RATES + ("eta",):
            a, b = nested.params[name], result.params[name]
            ea, eb = nested.stderr.get(name, 0.0), result.stderr.get(name, 0.0)
            combined = math.hypot(ea, eb)
            drift.append(
                {
                    "parameter": name,
                    "subset": a,
                    "subset_err": ea,
                    "all": b,
                    "all_err": eb,
                    "shift_sigma": (b - a) / combined if combined > 0 else math.inf,
                }
            )
        report["drift"] = drift
        report["subset_reduced_chi2"] = nested.reduced_chi2
    return report


def table_row(result: FitResult, problem: FitProblem, label: str = "") -> str:
    """One line in the layout: t0 t1 gamma S0 S1 D0 D1 ts I_max."""
    d = result.derived()
    p, e = result.params, result.stderr
    cells = [label or "fit"]
    cells += [f"{d['t0'][0]:.2f} ± {d['t0'][1]:.2f}", f"{d['t1'][0]:.2f} ± {d['t1'][1]:.2f}"]
    cells += [f"{p[n]:.2f} ± {e[n]:.2f}" for n in RATES]
    cells += [f"{d['ts'][0]:.1f} ± {d['ts'][1]:.1f}"]
    cells += [f"{max(ds.intensity for ds in problem.datasets):.2f}"]
    return " | ".join(cells)


TABLE_HEADER = " | ".join(
    ["NV", "t0 (ns)", "t1 (ns)", "gamma (MHz)", "S0 (MHz)", "S1 (MHz)", "D0 (MHz)", "D1 (MHz)",
     "ts (ns)", "I_max (I_sat)"]
)


def synthetic_datasets(
    model: RateModel,
    intensities: Sequence[float],
    n_bins: int = 240,
    dt: float = pp.DEFAULT_BIN_NS,
    n_avg: float = 3e7,
    seed: int | None = None,
) -> list[FitDataset]:
    """Model traces at several intensities, optionally with Poisson shot noise."""
    from .synth import stream

    r_sat = pp.saturation_rate(model)
    out = []
    for k, intensity in enumerate(intensities):
        m = model.with_rate(intensity * r_sat)
        traces = []
        for j, spin in enumerate(("ms0", "ms1")):
            bins = pp.fluorescence_trace(m, spin, n_bins, dt).bins
            if seed is not None:
                bins = stream(seed, k, j).poisson(bins * n_avg) / n_avg
            traces.append(FluorescenceTrace(dt, bins))
        out.append(FitDataset(float(intensity), traces[0], traces[1], n_avg, label=f"I={intensity:g}"))
    return out
