import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvreadout import io
from nvreadout import photophysics as pp
from nvreadout import synth
from nvreadout.estimators import CalibrationPair, HistogramData
from nvreadout.io import BinningConfig, SYNC, PHOTON


def records(pairs):
    arr = np.empty(len(pairs), dtype=io.RECORD_DTYPE)
    for i, (t, c) in enumerate(pairs):
        arr[i] = (t, c)
    return arr


def random_stream(rng, n_sync=200, period=3000, rate=0.02):
    """Syncs every ``period`` ns with jitter; photons uniformly spread, some before the first sync."""
    sync_t = np.cumsum(rng.integers(period - 50, period + 50, n_sync)) + 500
    n_ph = rng.poisson(rate * (sync_t[-1] + period))
    ph_t = rng.integers(0, sync_t[-1] + period, n_ph)
    t = np.concatenate([sync_t, ph_t])
    ch = np.concatenate([np.full(sync_t.size, SYNC), np.full(ph_t.size, PHOTON)])
    order = np.lexsort((-ch, t))  # a sync sharing a timestamp with photons comes first
    return records(list(zip(t[order], ch[order])))


def brute_force(recs, dt_ps, n_bins, offset_ps=0):
    counts = [0] * n_bins
    discarded = 0
    syncs = [int(r["timestamp"]) for r in recs if r["channel"] == SYNC]
    for i, r in enumerate(recs):
        if r["channel"] != PHOTON:
            continue
        t = int(r["timestamp"])
        last = None
        for j in range(i - 1, -1, -1):
            if recs[j]["channel"] == SYNC:
                last = int(recs[j]["timestamp"])
                break
        if last is None:
            discarded += 1
            continue
        rel = (t - last) * 1000 - offset_ps
        k = rel // dt_ps
        if rel >= 0 and k < n_bins:
            counts[k] += 1
        else:
            discarded += 1
    return np.array(counts), discarded, len(syncs)


# -- text formats ----------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_trace_round_trip(tmp_path, nv1, suffix):
    trace = pp.fluorescence_trace(nv1, "ms0", 50)
    path = tmp_path / f"trace{suffix}"
    io.write_trace(path, trace, nv1)
    back = io.read_trace(path)
    assert back.dt == trace.dt
    assert np.abs(back.bins - trace.bins).max() < 1e-12


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_calibration_round_trip(tmp_path, nv1_cal, suffix):
    path = tmp_path / f"cal{suffix}"
    io.write_calibration(path, nv1_cal)
    back = io.read_calibration(path)
    assert back.dt == nv1_cal.dt and back.n_cal is None
    assert np.abs(back.m0 - nv1_cal.m0).max() < 1e-12
    assert np.abs(back.m1 - nv1_cal.m1).max() < 1e-12


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_histogram_round_trip(tmp_path, nv1_cal, suffix):
    hist = synth.sample_histogram(nv1_cal, synth.MixtureSpec(0.3, 100_000, seed=1))
    path = tmp_path / f"hist{suffix}"
    io.write_histogram(path, hist, {"p_flip": 0.3})
    back = io.read_histogram(path)
    assert np.array_equal(back.counts, hist.counts)
    assert back.n_meas == hist.n_meas and back.dt == hist.dt


def test_single_row_needs_dt(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("t_start_ns,mean_photons\n0,0.1\n")
    with pytest.raises(io.SchemaError, match="dt_ns"):
        io.read_trace(path)
    path.write_text("# dt_ns: 4.0\nt_start_ns,mean_photons\n0,0.1\n")
    assert io.read_trace(path).dt == 4.0


def test_schema_errors_name_line_and_field(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# dt_ns: 8.33\nt_start_ns,m0,m1\n0,0.001,0.002\n8.33,abc,0.002\n")
    with pytest.raises(io.SchemaError, match=r"line 4: field 'm0'"):
        io.read_calibration(path)
    path.write_text("t_start_ns,m0\n0,0.001\n")
    with pytest.raises(io.SchemaError, match=r"line 1: missing column"):
        io.read_calibration(path)
    path.write_text("# dt_ns: 8.33\nt_start_ns,m0,m1\n0,0.001,0.002\n8.33,0.001\n")
    with pytest.raises(io.SchemaError, match=r"line 4: expected 3 fields"):
        io.read_calibration(path)
    path.write_text("# dt_ns: 8.33\n# n_meas: 10\nt_start_ns,counts\n0,3\n8.33,-1\n")
    with pytest.raises(io.SchemaError, match=r"line 5: field 'counts' is negative"):
        io.read_histogram(path)
    path.write_text("t_start_ns,counts\n0,3\n8.33,1\n")
    with pytest.raises(io.SchemaError, match="n_meas"):
        io.read_histogram(path)
    path.write_text("t_start_ns,mean_photons\n0,0.1\n8,0.1\n17,0.1\n")
    with pytest.raises(io.SchemaError, match="line 4: field 't_start_ns'"):
        io.read_trace(path)


def test_mismatched_calibration_lengths(tmp_path):
    path = tmp_path / "cal.json"
    path.write_text(json.dumps({"dt": 8.33, "m0": [0.001, 0.002], "m1": [0.001]}))
    with pytest.raises(io.SchemaError, match="equal length"):
        io.read_calibration(path)
    path.write_text('{"dt": 8.33, "m0": [0.001],\n "m1": [0.001')
    with pytest.raises(io.SchemaError, match="line 2"):
        io.read_calibration(path)


def test_rows_round_trip(tmp_path):
    rows = [{"method": "approx_mle", "std": 0.05}, {"method": "exact_mle", "std": 0.051}]
    path = tmp_path / "rows.csv"
    io.write_rows(path, rows, {"seed": 3})
    back, meta = io.read_rows(path)
    assert meta == {"seed": 3}
    assert [r["method"] for r in back] == ["approx_mle", "exact_mle"]
    assert float(back[1]["std"]) == 0.051


def test_synth_export_reads_back_identically(tmp_path, nv1_cal):
    hist = synth.sample_histogram(nv1_cal, synth.MixtureSpec(0.5, 10**5, seed=8), 2)
    with open(tmp_path / "h.csv", "w", newline="") as fh:
        io.write_histogram(fh, hist)
    back = io.read_histogram(tmp_path / "h.csv")
    assert np.array_equal(back.counts, hist.counts)


# -- binary time tags --------------------------------------------------------------

def test_time_tag_round_trip(tmp_path, rng):
    recs = random_stream(rng, 20)
    path = tmp_path / "tags.nvtt"
    io.write_time_tags(path, recs["timestamp"], recs["channel"])
    assert path.stat().st_size == 16 + 9 * recs.size
    assert np.array_equal(io.read_time_tags(path), recs)
    chunks = list(io.iter_time_tags(path, chunk_records=7))
    assert all(c.size <= 7 for c in chunks)


def _write_raw(path, recs, count=None):
    with open(path, "wb") as fh:
        fh.write(io.HEADER.pack(io.MAGIC, io.VERSION, 0, recs.size if count is None else count))
        fh.write(recs.tobytes())


def test_malformed_streams(tmp_path):
    path = tmp_path / "bad.nvtt"
    recs = records([(0, SYNC), (5, PHOTON), (9, PHOTON)])
    bad = recs.copy()
    bad["channel"][2] = 7
    _write_raw(path, bad)
    with pytest.raises(io.MalformedRecordError) as err:
        io.read_time_tags(path)
    assert err.value.offset == 16 + 2 * 9 + 8
    back = recs.copy()
    back["timestamp"][2] = 3
    _write_raw(path, back)
    with pytest.raises(io.MalformedRecordError, match="decreases") as err:
        io.read_time_tags(path)
    assert err.value.offset == 16 + 2 * 9
    _write_raw(path, recs, count=4)
    with pytest.raises(io.MalformedRecordError, match="truncated"):
        io.read_time_tags(path)
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(io.MalformedRecordError, match="magic"):
        io.read_time_tags(path)


def test_decrease_across_chunks_detected(tmp_path):
    path = tmp_path / "bad.nvtt"
    _write_raw(path, records([(0, SYNC), (10, PHOTON), (4, PHOTON), (12, PHOTON)]))
    with pytest.raises(io.MalformedRecordError) as err:
        list(io.iter_time_tags(path, chunk_records=2))
    assert err.value.offset == 16 + 2 * 9


def test_writer_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        io.write_time_tags(tmp_path / "x", [3, 1], [0, 0])
    with pytest.raises(ValueError):
        io.write_time_tags(tmp_path / "x", [1, 3], [0, 4])


def test_bin_boundaries():
    cfg = BinningConfig(dt=10.0, n_bins=4)
    res = io.bin_time_tags(records([(0, SYNC), (0, PHOTON), (10, PHOTON), (9, PHOTON), (40, PHOTON)]), cfg)
    assert res.histogram.counts.tolist() == [2, 1, 0, 0]
    assert res.discarded == 1 and res.photons_total == 4 and res.histogram.n_meas == 1


def test_fractional_bin_width():
    # 8.33 ns bins: 8330 ps edges, so t = 8 ns is bin 0 and t = 9 ns bin 1
    res = io.bin_time_tags(records([(100, SYNC), (108, PHOTON), (109, PHOTON), (116, PHOTON), (117, PHOTON)]),
                           BinningConfig(n_bins=3))
    assert res.histogram.counts.tolist() == [1, 2, 1]


def test_sync_offset_and_pre_sync_photons():
    recs = records([(1, PHOTON), (10, SYNC), (12, PHOTON), (25, PHOTON)])
    res = io.bin_time_tags(recs, BinningConfig(dt=5.0, n_bins=4, sync_offset=5.0))
    assert res.histogram.counts.tolist() == [0, 0, 1, 0]
    assert res.discarded == 2


def test_zero_sync_error():
    with pytest.raises(io.ZeroSyncError):
        io.bin_time_tags(records([(1, PHOTON), (2, PHOTON)]), BinningConfig())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_binning_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    recs = random_stream(rng, 60)
    cfg = BinningConfig(n_bins=300, sync_offset=12.5)
    res = io.bin_time_tags(recs, cfg)
    counts, discarded, n_sync = brute_force(recs, cfg.dt_ps, cfg.n_bins, cfg.offset_ps)
    assert np.array_equal(res.histogram.counts, counts)
    assert res.discarded == discarded and res.histogram.n_meas == n_sync
    assert res.photons_total == res.histogram.counts.sum() + res.discarded


def test_binning_input_forms(tmp_path, rng):
    recs = random_stream(rng, 50)
    cfg = BinningConfig()
    ref = io.bin_time_tags(recs, cfg)
    path = tmp_path / "t.nvtt"
    io.write_time_tags(path, recs["timestamp"], recs["channel"])
    for chunk in (1, 13, 1000):
        res = io.bin_time_tags(io.iter_time_tags(path, chunk), cfg)
        assert np.array_equal(res.histogram.counts, ref.histogram.counts)
        assert res.discarded == ref.discarded
    tuples = [(int(t), int(c)) for t, c in zip(recs["timestamp"], recs["channel"])]
    assert np.array_equal(io.bin_time_tags(tuples, cfg).histogram.counts, ref.histogram.counts)
    objs = [io.TimeTagRecord(t, c) for t, c in tuples]
    assert np.array_equal(io.bin_time_tags(iter(objs), cfg).histogram.counts, ref.histogram.counts)


@given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.integers(1, 40000))
@settings(max_examples=40, deadline=None)
def test_rebinning_invariant(seed, half_bins, dt_ps):
    recs = random_stream(np.random.default_rng(seed), 15, period=1000, rate=0.1)
    fine = io.bin_time_tags(recs, BinningConfig(dt=dt_ps / 1000, n_bins=2 * half_bins))
    coarse = io.bin_time_tags(recs, BinningConfig(dt=2 * dt_ps / 1000, n_bins=half_bins))
    assert np.array_equal(fine.histogram.counts.reshape(-1, 2).sum(axis=1), coarse.histogram.counts)
    assert fine.discarded == coarse.discarded


def test_binning_config_validation():
    with pytest.raises(ValueError):
        BinningConfig(dt=0)
    with pytest.raises(ValueError):
        BinningConfig(n_bins=0)
    with pytest.raises(ValueError):
        BinningConfig(dt=1e-4)
    assert BinningConfig().dt_ps == 8330


# -- manifests ---------------------------------------------------------------

def test_manifest_loading(tmp_path, nv1_base):
    from nvreadout.fitting import synthetic_datasets

    entries = []
    for k, d in enumerate(synthetic_datasets(nv1_base, [0.3, 0.8], n_bins=40)):
        if k == 0:
            io.write_calibration(tmp_path / "c0.csv", CalibrationPair(d.dt, d.ms0.bins, d.ms1.bins))
            entries.append({"intensity": d.intensity, "calibration": "c0.csv", "n_avg": 1e7})
        else:
            io.write_trace(tmp_path / "a.csv", d.ms0)
            io.write_trace(tmp_path / "b.json", d.ms1)
            entries.append({"intensity": d.intensity, "ms0": "a.csv", "ms1": "b.json"})
    io.write_manifest(tmp_path / "m.json", entries, {"t0": 12.94, "sigma_t0": 0.1, "t1": 6.29, "sigma_t1": 0.1},
                      weighting="uniform", initial_guess={"gamma": 60.0})
    problem, guess = io.load_manifest(tmp_path / "m.json")
    assert len(problem.datasets) == 2 and problem.weighting == "uniform"
    assert problem.datasets[0].n_avg == 1e7 and problem.datasets[1].n_avg == 3e7
    assert problem.constraints.t1 == 6.29
    assert guess == {"gamma": 60.0}


def test_manifest_errors(tmp_path):
    path = tmp_path / "m.json"
    io.write_manifest(path, [])
    with pytest.raises(io.SchemaError, match="datasets"):
        io.load_manifest(path)
    io.write_manifest(path, [{"intensity": 1.0}])
    with pytest.raises(io.SchemaError, match=r"datasets\[0\]"):
        io.load_manifest(path)
    io.write_manifest(path, [{"ms0": "a", "ms1": "b"}])
    with pytest.raises(io.SchemaError, match="intensity"):
        io.load_manifest(path)
