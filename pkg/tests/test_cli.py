import json

import numpy as np
import pytest

from nvreadout import cli, io
from nvreadout import photophysics as pp
from nvreadout.fitting import synthetic_datasets


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_simulate_contrast_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "ms0.csv", tmp_path / "ms1.csv"
    assert run(["simulate", "--params", "NV1", "--intensity", 2, "--spin", "ms0", "-o", a], capsys)[0] == 0
    assert run(["simulate", "--params", "NV1", "--intensity", 2, "--spin", "ms1", "-o", b], capsys)[0] == 0
    m0, m1 = io.read_trace(a).bins, io.read_trace(b).bins
    assert len(m0) == 360 and np.all(m0[:10] > m1[:10])
    first = a.read_bytes()
    run(["simulate", "--params", "NV1", "--intensity", 2, "--spin", "ms0", "-o", a], capsys)
    assert a.read_bytes() == first
    assert "# config:" in a.read_text() and '"seed": 0' in a.read_text()


def test_simulate_rejects_zero_intensity(capsys):
    code, out, err = run(["simulate", "--intensity", 0], capsys)
    assert code == 1 and err.startswith("nvreadout: error: UsageError:")


def test_simulate_json_stdout(capsys):
    code, out, _ = run(["simulate", "--bins", 10, "--format", "json"], capsys)
    payload = json.loads(out)
    assert code == 0 and len(payload["bins"]) == 10 and payload["model"]["gamma"] == 67.4


def test_params_file(tmp_path, capsys):
    path = tmp_path / "rates.json"
    path.write_text(json.dumps({"gamma": 67.4, "S0": 9.9, "S1": 91.6, "D0": 4.83, "D1": 2.11, "eta": 0.01}))
    code, out, _ = run(["simulate", "--params", path, "--bins", 5, "--format", "json"], capsys)
    assert code == 0 and json.loads(out)["model"]["eta"] == 0.01
    code, _, err = run(["simulate", "--params", "NV7"], capsys)
    assert code == 1 and "preset" in err


@pytest.fixture
def files(tmp_path, capsys):
    cal = tmp_path / "cal.csv"
    hist = tmp_path / "hist.csv"
    run(["simulate", "--spin", "both", "-o", cal], capsys)
    run(["sample", "--cal", cal, "--p-flip", 0.5, "--n-meas", 100000, "--seed", 7, "-o", hist], capsys)
    return cal, hist


def test_estimate_all(files, capsys):
    cal, hist = files
    code, out, _ = run(["estimate", "--data", hist, "--cal", cal], capsys)
    assert code == 0
    payload = json.loads(out)
    reports = payload["reports"]
    assert set(reports) == {"exact_mle", "approx_mle", "photon_counting"}
    for r in reports.values():
        assert abs(r["s_z"]) < 4 * r["predicted_std"]
    assert payload["config"]["resolved_window_bins"] == reports["photon_counting"]["window_bins"]
    assert reports["photon_counting"]["extra"]["window_source"] == "auto"


def test_estimate_csv_and_fixed_window(files, tmp_path, capsys):
    cal, hist = files
    out = tmp_path / "rep.csv"
    code, *_ = run(["estimate", "--data", hist, "--cal", cal, "--method", "counting", "--window", 20, "-o", out], capsys)
    rows, meta = io.read_rows(out)
    assert code == 0 and len(rows) == 1 and rows[0]["window_bins"] == "20"
    assert meta["config"]["window"] == "20"


def test_estimate_missing_calibration(files, tmp_path, capsys):
    _, hist = files
    code, _, err = run(["estimate", "--data", hist, "--cal", tmp_path / "nope.csv"], capsys)
    assert code == 1 and err.startswith("nvreadout: error: FileNotFoundError:") and "--cal" in err


def test_rabi(tmp_path, capsys):
    out = tmp_path / "rabi.csv"
    code, *_ = run(["monte-carlo", "rabi", "--n-meas", 100000, "--reps", 20, "--durations", "0:183.4:5",
                    "--threads", 2, "-o", out], capsys)
    rows, meta = io.read_rows(out)
    assert code == 0 and len(rows) == 15
    assert {r["method"] for r in rows} == {"exact_mle", "approx_mle", "photon_counting"}
    assert {"mean", "std", "predicted_std", "duration_ns"} <= set(rows[0])
    assert meta["config"]["seed"] == 0 and meta["config"]["reps"] == 20
    assert "std_ratio_counting_over_approx" in meta["summary"]


def test_snr_sweep(tmp_path, capsys):
    for argv in (["snr-sweep"], ["monte-carlo", "snr-sweep"]):
        code, out, _ = run(argv + ["--intensities", "0.5,1,2,4,8", "--format", "json"], capsys)
        rows = json.loads(out)["rows"]
        snr = [r["snr_approx"] for r in rows]
        assert code == 0 and np.all(np.diff(snr) > 0)
        assert all(r["percent_gap"] > 0 for r in rows)


def test_fit_round_trip(tmp_path, capsys):
    base = pp.PRESETS["NV1"]
    entries = []
    for k, d in enumerate(synthetic_datasets(base, [0.3, 0.6, 1.0], n_bins=120)):
        io.write_trace(tmp_path / f"a{k}.csv", d.ms0)
        io.write_trace(tmp_path / f"b{k}.csv", d.ms1)
        entries.append({"intensity": d.intensity, "ms0": f"a{k}.csv", "ms1": f"b{k}.csv"})
    io.write_manifest(tmp_path / "m.json", entries, {"t0": base.t0, "sigma_t0": 0.1, "t1": base.t1, "sigma_t1": 0.1})
    out = tmp_path / "fit.json"
    code, stdout, _ = run(["fit", "--manifest", tmp_path / "m.json", "-o", out], capsys)
    assert code == 0 and stdout.startswith("NV | ")
    result = json.loads(out.read_text())
    for name in ("gamma", "S0", "S1", "D0", "D1"):
        assert result["params"][name] == pytest.approx(getattr(base, name), rel=0.01)
    assert result["converged"] and result["config"]["max_iter"] == 500


def test_bin(tmp_path, capsys):
    tags = tmp_path / "t.nvtt"
    io.write_time_tags(tags, [0, 0, 9, 100, 101], [1, 0, 0, 1, 0])
    code, out, _ = run(["bin", "--tags", tags, "--dt", 8.33, "--bins", 4, "--format", "json"], capsys)
    payload = json.loads(out)
    assert code == 0 and payload["counts"] == [2, 1, 0, 0] and payload["n_meas"] == 2
    code, _, err = run(["bin", "--tags", tmp_path / "missing"], capsys)
    assert code == 1 and "nvreadout: error:" in err


def test_bad_flags_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--bins", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        cli.main(["estimate", "--method", "bogus", "--data", "x", "--cal", "y"])


def test_float_list():
    assert cli._float_list("1,2.5") == [1.0, 2.5]
    assert cli._float_list("0:1:3") == [0.0, 0.5, 1.0]
