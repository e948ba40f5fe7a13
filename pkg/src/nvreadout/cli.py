"""Command-line front end.

Every command writes its resolved configuration (defaults and seed
included) into the output metadata.  Errors go to stderr as
``nvreadout: error: <Kind>: <message>`` with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import estimators as est
from . import fitting
from . import io
from . import photophysics as pp
from . import synth

PROG = "nvreadout"

METHOD_ALIASES = {"exact": "exact_mle", "approx": "approx_mle", "counting": "photon_counting"}


class UsageError(ValueError):
    pass


def _float_list(text: str) -> list[float]:
    """``"a,b,c"`` or ``"start:stop:count"`` (inclusive linspace)."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise argparse.ArgumentTypeError("count must be >= 1")
        return [float(x) for x in np.linspace(start, stop, count)]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def load_model(params: str, intensity: float) -> pp.RateModel:
    """Preset name (NV1/NV2/NV3) or JSON file of rates, placed at ``intensity`` x I_sat."""
    if params.upper() in pp.PRESETS:
        return pp.preset(params, intensity)
    path = Path(params)
    if not path.exists():
        raise UsageError(f"--params {params!r} is neither a preset {sorted(pp.PRESETS)} nor a file")
    with open(path) as fh:
        values = json.load(fh)
    values = values.get("model", values)
    fields = {k: float(values[k]) for k in ("gamma", "S0", "S1", "D0", "D1")}
    base = pp.RateModel(R=0.0, eta=float(values.get("eta", 1.0)), **fields)
    return pp.at_intensity(base, intensity)


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}


def _fmt(args, default: str = "csv") -> str:
    if args.format:
        return args.format
    suffix = Path(args.output).suffix.lower() if args.output else ""
    if suffix in (".json", ".csv"):
        return suffix[1:]
    return default


def _emit(args, fmt: str, csv_writer, json_payload) -> None:
    """Write to ``--output`` or, without one, to stdout."""
    def write(fh):
        if fmt == "json":
            json.dump(json_payload(), fh, indent=2)
            fh.write("\n")
        else:
            csv_writer(fh)

    if args.output:
        with open(args.output, "w", newline="") as fh:
            write(fh)
    else:
        write(sys.stdout)


# -- commands ------------------------------------------------------------------

def cmd_simulate(args) -> None:
    if args.intensity <= 0:
        raise UsageError("--intensity must be > 0 (no excitation means no readout)")
    model = load_model(args.params, args.intensity)
    fmt = _fmt(args)
    meta = {"config": _config(args), "model": model.to_dict()}
    if args.spin == "both":
        cal = synth.simulated_calibration(model, args.bins, args.dt)

        def payload():
            return {"dt": cal.dt, "m0": cal.m0.tolist(), "m1": cal.m1.tolist(), "n_cal": None, "metadata": meta}

        _emit(args, fmt, lambda p: io.write_calibration(p, cal, meta), payload)
        return
    trace = pp.fluorescence_trace(model, args.spin, args.bins, args.dt, args.dt_solver)
    _emit(args, fmt, lambda p: io.write_trace(p, trace, model, {"config": meta["config"]}),
          lambda: io.trace_to_json(trace, model, {"config": meta["config"]}))


def cmd_sample(args) -> None:
    cal = io.read_calibration(args.cal)
    spec = synth.MixtureSpec(args.p_flip, args.n_meas, args.seed, args.background)
    hist = synth.sample_histogram(cal, spec)
    fmt = _fmt(args)
    meta = {"config": _config(args)}
    _emit(
        args, fmt,
        lambda p: io.write_histogram(p, hist, meta),
        lambda: {"dt": hist.dt, "counts": hist.counts.tolist(), "n_meas": hist.n_meas, "metadata": meta},
    )


def cmd_estimate(args) -> None:
    for flag, path in (("--data", args.data), ("--cal", args.cal)):
        if not Path(path).exists():
            raise FileNotFoundError(f"{flag} file not found: {path}")
    data = io.read_histogram(args.data)
    cal = io.read_calibration(args.cal)
    if args.window == "auto":
        window = est.optimal_window(cal, data.n_meas)
        window_source = "auto"
    else:
        window = int(args.window)
        window_source = "user"
    methods = est.METHODS if args.method == "all" else (METHOD_ALIASES[args.method],)
    reports = {}
    for m in methods:
        if m == "exact_mle":
            reports[m] = est.estimate_exact_mle(data, cal)
        elif m == "approx_mle":
            reports[m] = est.estimate_approx_mle(data, cal)
        else:
            reports[m] = est.estimate_photon_counting(data, cal, window)
            reports[m].extra["window_source"] = window_source
            reports[m].extra["window_ns"] = window * cal.dt
    config = _config(args)
    config["resolved_window_bins"] = window
    fmt = _fmt(args, default="json")

    def csv_writer(target):
        rows = [dict(method=k, **{f: v for f, v in r.to_dict().items() if f not in ("method", "extra")})
                for k, r in reports.items()]
        io.write_rows(target, rows, {"config": config})

    _emit(args, fmt, csv_writer, lambda: {
        "reports": {k: r.to_dict() for k, r in reports.items()}, "config": config})


def _calibration_for(args) -> tuple[est.CalibrationPair, dict]:
    if getattr(args, "cal", None):
        return io.read_calibration(args.cal), {}
    model = load_model(args.params, args.intensity)
    return synth.simulated_calibration(model, args.bins, args.dt), {"model": model.to_dict()}


def cmd_rabi(args) -> None:
    cal, extra = _calibration_for(args)
    durations = args.durations if args.durations is not None else list(np.linspace(0, 2 * args.t_pi, 17))
    results = synth.rabi_sweep(cal, args.t_pi, durations, args.n_meas, args.reps, args.seed,
                               window_bins=None if args.window == "auto" else int(args.window),
                               workers=args.threads)
    rows = [row for r in results for row in r.rows()]
    config = {**_config(args), "durations": [float(d) for d in durations], **extra}
    summary = {
        "std_ratio_counting_over_approx": synth.std_ratio(results, "photon_counting", "approx_mle"),
        "std_ratio_exact_over_approx": synth.std_ratio(results, "exact_mle", "approx_mle"),
    }
    fmt = _fmt(args)
    _emit(
        args, fmt,
        lambda p: io.write_rows(p, rows, {"config": config, "summary": summary}),
        lambda: {"rows": rows, "config": config, "summary": summary},
    )


def cmd_snr_sweep(args) -> None:
    model = load_model(args.params, 1.0)
    points = synth.snr_intensity_sweep(model, args.intensities, args.bins, args.dt)
    rows = [p.row() for p in points]
    config = {**_config(args), "model": model.to_dict()}
    fmt = _fmt(args)
    _emit(
        args, fmt, lambda p: io.write_rows(p, rows, {"config": config}), lambda: {"rows": rows, "config": config}
    )


def cmd_fit(args) -> None:
    if not Path(args.manifest).exists():
        raise FileNotFoundError(f"--manifest file not found: {args.manifest}")
    problem, guess = io.load_manifest(args.manifest)
    if args.weighting:
        problem = fitting.FitProblem(problem.datasets, problem.constraints, args.weighting,
                                     problem.lifetime_mode, problem.fit_background)
    result = fitting.fit(problem, guess, max_iter=args.max_iter)
    table = "\n".join([fitting.TABLE_HEADER, fitting.table_row(result, problem, args.label)])
    report = fitting.goodness_report(result, problem)
    config = _config(args)
    fmt = _fmt(args, default="json")

    def csv_writer(target):
        rows = [{"parameter": k, "value": v, "stderr": result.stderr.get(k, "")} for k, v in result.params.items()]
        io.write_rows(target, rows, {"config": config, "reduced_chi2": result.reduced_chi2,
                                     "converged": result.converged})

    _emit(args, fmt, csv_writer, lambda: {
        **result.to_dict(), "goodness": report, "table": table, "config": config})
    if args.output:
        print(table)


def cmd_bin(args) -> None:
    config = io.BinningConfig(args.dt, args.bins, args.sync_offset)
    res = io.bin_time_tags(io.iter_time_tags(args.tags), config)
    meta = {"config": _config(args), "discarded": res.discarded, "photons_total": res.photons_total}
    hist = res.histogram
    fmt = _fmt(args)
    _emit(
        args, fmt,
        lambda p: io.write_histogram(p, hist, meta),
        lambda: {"dt": hist.dt, "counts": hist.counts.tolist(), "n_meas": hist.n_meas, "metadata": meta},
    )


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--output", "-o", help="output path (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), help="output format")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker cap for Monte Carlo")

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--params", default="NV1", help="preset NV1/NV2/NV3 or JSON file of rates")
    model_args.add_argument("--bins", type=_positive_int, default=synth.DEFAULT_TRACE_BINS)
    model_args.add_argument("--dt", type=_positive_float, default=pp.DEFAULT_BIN_NS, help="bin width in ns")

    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, model_args], help="rate-model readout trace")
    p.add_argument("--intensity", type=float, default=pp.READOUT_INTENSITY, help="laser intensity in I_sat")
    p.add_argument("--spin", choices=("ms0", "ms1", "pumped", "both"), default="ms0",
                   help="'both' writes a calibration pair")
    p.add_argument("--dt-solver", type=_positive_float, default=pp.DEFAULT_DT_SOLVER)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sample", parents=[common], help="Poisson histogram for a spin mixture")
    p.add_argument("--cal", required=True, help="calibration file")
    p.add_argument("--p-flip", type=float, required=True)
    p.add_argument("--n-meas", type=_positive_int, default=synth.DEFAULT_N_MEAS)
    p.add_argument("--background", type=float, default=0.0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate", parents=[common], help="estimate S_z from a histogram")
    p.add_argument("--data", required=True, help="histogram file")
    p.add_argument("--cal", required=True, help="calibration file")
    p.add_argument("--method", choices=("exact", "approx", "counting", "all"), default="all")
    p.add_argument("--window", default="auto", help="photon-counting window in bins, or 'auto'")
    p.set_defaults(func=cmd_estimate)

    def add_rabi(p):
        p.add_argument("--cal", help="calibration file (default: simulate from --params)")
        p.add_argument("--intensity", type=float, default=pp.READOUT_INTENSITY)
        p.add_argument("--t-pi", type=_positive_float, default=synth.DEFAULT_T_PI)
        p.add_argument("--durations", type=_float_list, help="ns; 'a,b,c' or 'start:stop:count'")
        p.add_argument("--n-meas", type=_positive_int, default=synth.DEFAULT_N_MEAS)
        p.add_argument("--reps", type=_positive_int, default=synth.DEFAULT_REPETITIONS)
        p.add_argument("--window", default="auto")
        p.set_defaults(func=cmd_rabi)

    def add_sweep(p):
        p.add_argument("--intensities", type=_float_list, default=_float_list("0.1,0.2,0.5,1,1.5,2,3,5,7,10"))
        p.set_defaults(func=cmd_snr_sweep)

    mc = sub.add_parser("monte-carlo", help="Monte Carlo experiments")
    mc_sub = mc.add_subparsers(dest="experiment", required=True)
    add_rabi(mc_sub.add_parser("rabi", parents=[common, model_args], help="estimator spread over a Rabi sweep"))
    add_sweep(mc_sub.add_parser("snr-sweep", parents=[common, model_args], help="SNR versus intensity"))
    add_sweep(sub.add_parser("snr-sweep", parents=[common, model_args], help="SNR versus intensity"))

    p = sub.add_parser("fit", parents=[common], help="fit the rate model to traces listed in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weighting", choices=("poisson", "uniform"))
    p.add_argument("--max-iter", type=_positive_int, default=500)
    p.add_argument("--label", default="fit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bin", parents=[common], help="histogram a binary time-tag file")
    p.add_argument("--tags", required=True)
    p.add_argument("--dt", type=_positive_float, default=pp.DEFAULT_BIN_NS)
    p.add_argument("--bins", type=_positive_int, default=synth.DEFAULT_TRACE_BINS)
    p.add_argument("--sync-offset", type=float, default=0.0)
    p.set_defaults(func=cmd_bin)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, ArithmeticError) as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
