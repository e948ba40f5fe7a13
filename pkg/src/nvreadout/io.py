"""File formats: CSV/JSON traces, calibrations, histograms; binary time tags.

CSV files may start with metadata lines ``# key: <json value>``; readers
collect them and skip them before the header row.

Binary time-tag stream (all little endian)::

    offset 0   4 bytes  magic b"NVTT"
    offset 4   u16      format version (1)
    offset 6   u16      reserved, 0
    offset 8   u64      record count n
    offset 16  n records of 9 bytes: u64 timestamp_ns, u8 channel

Channel 0 is a detected photon, channel 1 a sync marker that starts one
readout.  Timestamps never decrease.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .estimators import CalibrationPair, EstimatorReport, HistogramData
from .photophysics import DEFAULT_BIN_NS, FluorescenceTrace

PHOTON = 0
SYNC = 1

MAGIC = b"NVTT"
VERSION = 1
HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("channel", "u1")])
assert RECORD_DTYPE.itemsize == 9


class SchemaError(ValueError):
    """A file does not follow the expected layout."""


class MalformedRecordError(SchemaError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class ZeroSyncError(ValueError):
    """A time-tag stream contains no sync markers."""


# -- CSV helpers ---------------------------------------------------------------

@contextmanager
def _opened(target, mode: str = "w"):
    """Yield ``target`` itself if it is a file object, else open it."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, mode, newline="") as fh:
            yield fh


def _write_csv(path, columns: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    names = list(columns)
    with _opened(path) as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}: {json.dumps(value)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_csv(path, required: tuple[str, ...]) -> tuple[dict[str, list[str]], dict, list[int]]:
    """Columns as raw strings, metadata, and the source line of each row."""
    metadata: dict = {}
    header = None
    columns: dict[str, list[str]] = {}
    lines: list[int] = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                key, sep, value = stripped[1:].partition(":")
                if sep:
                    try:
                        metadata[key.strip()] = json.loads(value)
                    except json.JSONDecodeError:
                        metadata[key.strip()] = value.strip()
                continue
            cells = next(csv.reader([stripped]))
            if header is None:
                header = [c.strip() for c in cells]
                missing = [c for c in required if c not in header]
                if missing:
                    raise SchemaError(f"{path}: line {lineno}: missing column(s) {missing}")
                columns = {c: [] for c in header}
                continue
            if len(cells) != len(header):
                raise SchemaError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(cells)}"
                )
            for name, cell in zip(header, cells):
                columns[name].append(cell.strip())
            lines.append(lineno)
    if header is None:
        raise SchemaError(f"{path}: no header row")
    if not lines:
        raise SchemaError(f"{path}: no data rows")
    return columns, metadata, lines


def _floats(path, columns, name, lines) -> np.ndarray:
    out = np.empty(len(lines))
    for i, (cell, lineno) in enumerate(zip(columns[name], lines)):
        try:
            out[i] = float(cell)
        except ValueError:
            raise SchemaError(f"{path}: line {lineno}: field {name!r} is not a number: {cell!r}") from None
        if not math.isfinite(out[i]):
            raise SchemaError(f"{path}: line {lineno}: field {name!r} is not finite")
    return out


def _ints(path, columns, name, lines) -> np.ndarray:
    out = np.empty(len(lines), dtype=np.int64)
    for i, (cell, lineno) in enumerate(zip(columns[name], lines)):
        try:
            out[i] = int(cell)
        except ValueError:
            raise SchemaError(f"{path}: line {lineno}: field {name!r} is not an integer: {cell!r}") from None
        if out[i] < 0:
            raise SchemaError(f"{path}: line {lineno}: field {name!r} is negative")
    return out


def _dt_from(path, t_start: np.ndarray, metadata: dict, lines) -> float:
    if "dt_ns" in metadata:
        return float(metadata["dt_ns"])
    if t_start.size < 2:
        raise SchemaError(f"{path}: single-row file needs a '# dt_ns:' metadata line")
    dt = float(t_start[1] - t_start[0])
    expected = t_start[0] + dt * np.arange(t_start.size)
    bad = np.nonzero(~np.isclose(t_start, expected, rtol=1e-9, atol=1e-9))[0]
    if dt <= 0 or bad.size:
        row = int(bad[0]) if bad.size else 1
        raise SchemaError(f"{path}: line {lines[row]}: field 't_start_ns' is not evenly spaced")
    return dt


def _is_json(path) -> bool:
    return isinstance(path, (str, os.PathLike)) and str(path).lower().endswith(".json")


def _write_json(path, payload: dict) -> None:
    with _opened(path) as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _read_json(path, required: tuple[str, ...]) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: top level must be an object")
    missing = [k for k in required if k not in payload]
    if missing:
        raise SchemaError(f"{path}: missing field(s) {missing}")
    return payload


# -- traces ------------------------------------------------------------------

def trace_to_json(trace: FluorescenceTrace, model=None, metadata: dict | None = None) -> dict:
    out = {"dt": trace.dt, "bins": [float(b) for b in trace.bins]}
    if model is not None:
        out["model"] = model.to_dict()
    if metadata:
        out["metadata"] = metadata
    return out


def write_trace(path, trace: FluorescenceTrace, model=None, metadata: dict | None = None) -> None:
    if _is_json(path):
        _write_json(path, trace_to_json(trace, model, metadata))
        return
    meta = {"dt_ns": trace.dt, **(metadata or {})}
    if model is not None:
        meta["model"] = model.to_dict()
    _write_csv(path, {"t_start_ns": trace.t_start, "mean_photons": trace.bins}, meta)


def read_trace(path) -> FluorescenceTrace:
    if _is_json(path):
        payload = _read_json(path, ("dt", "bins"))
        try:
            return FluorescenceTrace(float(payload["dt"]), np.asarray(payload["bins"], dtype=float))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: field 'bins': {exc}") from None
    cols, meta, lines = _read_csv(path, ("t_start_ns", "mean_photons"))
    t = _floats(path, cols, "t_start_ns", lines)
    bins = _floats(path, cols, "mean_photons", lines)
    bad = np.nonzero(bins < 0)[0]
    if bad.size:
        raise SchemaError(f"{path}: line {lines[bad[0]]}: field 'mean_photons' is negative")
    return FluorescenceTrace(_dt_from(path, t, meta, lines), bins)


# -- calibrations --------------------------------------------------------------

def write_calibration(path, cal: CalibrationPair, metadata: dict | None = None) -> None:
    if _is_json(path):
        payload = {"dt": cal.dt, "m0": [float(v) for v in cal.m0], "m1": [float(v) for v in cal.m1],
                   "n_cal": cal.n_cal}
        if metadata:
            payload["metadata"] = metadata
        _write_json(path, payload)
        return
    meta = {"dt_ns": cal.dt, **(metadata or {})}
    if cal.n_cal is not None:
        meta["n_cal"] = cal.n_cal
    t = cal.dt * np.arange(len(cal))
    _write_csv(path, {"t_start_ns": t, "m0": cal.m0, "m1": cal.m1}, meta)


def read_calibration(path) -> CalibrationPair:
    if _is_json(path):
        p = _read_json(path, ("dt", "m0", "m1"))
        m0, m1 = p["m0"], p["m1"]
        if not isinstance(m0, list) or not isinstance(m1, list) or len(m0) != len(m1):
            raise SchemaError(f"{path}: fields 'm0' and 'm1' must be lists of equal length")
        try:
            return CalibrationPair(float(p["dt"]), np.asarray(m0, float), np.asarray(m1, float), p.get("n_cal"))
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    cols, meta, lines = _read_csv(path, ("t_start_ns", "m0", "m1"))
    m0 = _floats(path, cols, "m0", lines)
    m1 = _floats(path, cols, "m1", lines)
    for name, arr in (("m0", m0), ("m1", m1)):
        bad = np.nonzero((arr < 0) | (arr >= 0.5))[0]
        if bad.size:
            raise SchemaError(f"{path}: line {lines[bad[0]]}: field {name!r} outside [0, 0.5)")
    dt = _dt_from(path, _floats(path, cols, "t_start_ns", lines), meta, lines)
    n_cal = meta.get("n_cal")
    return CalibrationPair(dt, m0, m1, int(n_cal) if n_cal is not None else None)


# -- histograms ----------------------------------------------------------------

def write_histogram(path, hist: HistogramData, metadata: dict | None = None) -> None:
    if _is_json(path):
        payload = {"dt": hist.dt, "counts": [int(c) for c in hist.counts], "n_meas": hist.n_meas}
        if metadata:
            payload["metadata"] = metadata
        _write_json(path, payload)
        return
    meta = {"dt_ns": hist.dt, "n_meas": hist.n_meas, **(metadata or {})}
    t = hist.dt * np.arange(len(hist))
    _write_csv(path, {"t_start_ns": t, "counts": hist.counts}, meta)


def read_histogram(path) -> HistogramData:
    if _is_json(path):
        p = _read_json(path, ("dt", "counts", "n_meas"))
        try:
            return HistogramData(float(p["dt"]), np.asarray(p["counts"]), int(p["n_meas"]))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: {exc}") from None
    cols, meta, lines = _read_csv(path, ("t_start_ns", "counts"))
    if "n_meas" not in meta:
        raise SchemaError(f"{path}: line 1: missing '# n_meas:' metadata")
    counts = _ints(path, cols, "counts", lines)
    dt = _dt_from(path, _floats(path, cols, "t_start_ns", lines), meta, lines)
    return HistogramData(dt, counts, int(meta["n_meas"]))


# -- reports and tables --------------------------------------------------------

def write_reports(path, reports: dict[str, EstimatorReport], metadata: dict | None = None) -> None:
    payload = {"reports": {k: r.to_dict() for k, r in reports.items()}}
    if metadata:
        payload["config"] = metadata
    _write_json(path, payload)


def write_rows(path_or_file, rows: list[dict], metadata: dict | None = None) -> None:
    """Flat records as CSV, with ``metadata`` as leading comment lines."""
    with _opened(path_or_file) as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}: {json.dumps(value)}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def read_rows(path) -> tuple[list[dict], dict]:
    cols, meta, lines = _read_csv(path, ())
    names = list(cols)
    return [{n: cols[n][i] for n in names} for i in range(len(lines))], meta


# -- binary time tags ----------------------------------------------------------

@dataclass(frozen=True)
class TimeTagRecord:
    timestamp: int
    channel: int


def write_time_tags(path, timestamps, channels) -> None:
    timestamps = np.asarray(timestamps, dtype=np.uint64)
    channels = np.asarray(channels, dtype=np.uint8)
    if timestamps.shape != channels.shape or timestamps.ndim != 1:
        raise ValueError("timestamps and channels must be 1-d and equally long")
    if np.any(np.diff(timestamps.astype(np.int64)) < 0):
        raise ValueError("timestamps must be non-decreasing")
    if np.any(channels > SYNC):
        raise ValueError("channels must be 0 (photon) or 1 (sync)")
    records = np.empty(timestamps.size, dtype=RECORD_DTYPE)
    records["timestamp"] = timestamps
    records["channel"] = channels
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 0, timestamps.size))
        fh.write(records.tobytes())


def iter_time_tags(path, chunk_records: int = 1 << 16) -> Iterator[np.ndarray]:
    """Validated record chunks from a binary time-tag file, read in one pass."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise MalformedRecordError("truncated header", len(head))
        magic, version, _, count = HEADER.unpack(head)
        if magic != MAGIC:
            raise MalformedRecordError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise MalformedRecordError(f"unsupported version {version}", 4)
        offset = HEADER.size
        last = None
        remaining = count
        while remaining:
            n = min(chunk_records, remaining)
            raw = fh.read(n * RECORD_DTYPE.itemsize)
            whole = len(raw) // RECORD_DTYPE.itemsize
            if whole < n:
                raise MalformedRecordError(
                    f"truncated stream: header promises {count} records", offset + whole * RECORD_DTYPE.itemsize
                )
            chunk = np.frombuffer(raw, dtype=RECORD_DTYPE)
            bad = np.nonzero(chunk["channel"] > SYNC)[0]
            if bad.size:
                i = int(bad[0])
                raise MalformedRecordError(
                    f"unknown channel {chunk['channel'][i]}", offset + i * RECORD_DTYPE.itemsize + 8
                )
            ts = chunk["timestamp"]
            back = np.nonzero(ts[1:] < ts[:-1])[0]
            if last is not None and ts[0] < last:
                back = np.concatenate([[-1], back])
            if back.size:
                i = int(back[0]) + 1
                raise MalformedRecordError("timestamp decreases", offset + i * RECORD_DTYPE.itemsize)
            last = ts[-1]
            yield chunk
            offset += n * RECORD_DTYPE.itemsize
            remaining -= n
        if fh.read(1):
            raise MalformedRecordError("trailing bytes after last record", offset)


def read_time_tags(path) -> np.ndarray:
    chunks = list(iter_time_tags(path))
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=RECORD_DTYPE)


@dataclass(frozen=True)
class BinningConfig:
    """Histogram layout.  ``dt`` and ``sync_offset`` are in ns and are
    quantized to whole picoseconds so bin edges are exact integers."""

    dt: float = DEFAULT_BIN_NS
    n_bins: int = 360
    sync_offset: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if self.dt_ps < 1:
            raise ValueError("dt below one picosecond")

    @property
    def dt_ps(self) -> int:
        return int(round(self.dt * 1000))

    @property
    def offset_ps(self) -> int:
        return int(round(self.sync_offset * 1000))


@dataclass
class BinningResult:
    histogram: HistogramData
    discarded: int
    photons_total: int


def _as_chunks(records, batch: int = 1 << 16) -> Iterator[np.ndarray]:
    if isinstance(records, np.ndarray):
        yield records
        return
    buf: list = []
    for item in records:
        if isinstance(item, np.ndarray):
            if buf:
                yield _records_array(buf)
                buf = []
            yield item
            continue
        buf.append(item)
        if len(buf) >= batch:
            yield _records_array(buf)
            buf = []
    if buf:
        yield _records_array(buf)


def _records_array(items) -> np.ndarray:
    out = np.empty(len(items), dtype=RECORD_DTYPE)
    for i, item in enumerate(items):
        if isinstance(item, TimeTagRecord):
            out[i] = (item.timestamp, item.channel)
        else:
            out[i] = tuple(item)
    return out


def bin_time_tags(records: Iterable | np.ndarray, config: BinningConfig) -> BinningResult:
    """Single-pass histogram of photon arrivals relative to the latest sync.

    ``records`` may be a record array, an iterable of record-array chunks
    (e.g. from :func:`iter_time_tags`), or an iterable of
    ``(timestamp_ns, channel)`` pairs.  A photon lands in bin
    ``floor((t - t_sync - offset) / dt)``; photons before the first sync or
    outside ``[0, n_bins * dt)`` are counted as discarded.
    """
    counts = np.zeros(config.n_bins, dtype=np.int64)
    dt_ps, offset_ps = config.dt_ps, config.offset_ps
    n_sync = 0
    discarded = 0
    total = 0
    last_sync = -1  # timestamp of the most recent sync, -1 before any
    for chunk in _as_chunks(records):
        if chunk.size == 0:
            continue
        ts = chunk["timestamp"].astype(np.int64)
        is_sync = chunk["channel"] == SYNC
        seen = np.cumsum(is_sync)
        sync_ts = ts[is_sync]
        prev = np.where(seen > 0, sync_ts[np.maximum(seen - 1, 0)] if sync_ts.size else last_sync, last_sync)
        photons = ~is_sync
        ph_t = ts[photons]
        ph_sync = prev[photons]
        total += int(ph_t.size)
        has_sync = ph_sync >= 0
        rel = (ph_t - ph_sync) * 1000 - offset_ps
        idx = np.floor_divide(rel, dt_ps)
        ok = has_sync & (rel >= 0) & (idx < config.n_bins)
        np.add.at(counts, idx[ok], 1)
        discarded += int(ph_t.size - np.count_nonzero(ok))
        n_sync += int(sync_ts.size)
        if sync_ts.size:
            last_sync = int(sync_ts[-1])
    if n_sync == 0:
        raise ZeroSyncError("time-tag stream contains no sync markers")
    hist = HistogramData(config.dt_ps / 1000.0, counts, n_sync)
    return BinningResult(hist, discarded, total)


# -- fit manifests -------------------------------------------------------------

def load_manifest(path):
    """Build a :class:`~nvreadout.fitting.FitProblem` from a JSON manifest.

    Each dataset names its traces either as ``ms0``/``ms1`` trace files or
    as one ``calibration`` file; relative paths resolve against the
    manifest's directory.  Returns ``(problem, initial_guess)``.
    """
    from .fitting import FitDataset, FitProblem, LifetimeConstraint

    path = Path(path)
    manifest = _read_json(path, ("datasets",))
    root = path.parent
    datasets = []
    if not isinstance(manifest["datasets"], list) or not manifest["datasets"]:
        raise SchemaError(f"{path}: field 'datasets' must be a non-empty list")
    for i, entry in enumerate(manifest["datasets"]):
        if "intensity" not in entry:
            raise SchemaError(f"{path}: datasets[{i}]: missing field 'intensity'")
        if "calibration" in entry:
            cal = read_calibration(root / entry["calibration"])
            ms0, ms1 = FluorescenceTrace(cal.dt, cal.m0), FluorescenceTrace(cal.dt, cal.m1)
        elif "ms0" in entry and "ms1" in entry:
            ms0, ms1 = read_trace(root / entry["ms0"]), read_trace(root / entry["ms1"])
        else:
            raise SchemaError(f"{path}: datasets[{i}]: needs 'calibration' or both 'ms0' and 'ms1'")
        datasets.append(
            FitDataset(float(entry["intensity"]), ms0, ms1, float(entry.get("n_avg", 3e7)),
                       label=str(entry.get("label", f"I={entry['intensity']}")))
        )
    constraints = None
    if manifest.get("constraints"):
        c = manifest["constraints"]
        try:
            constraints = LifetimeConstraint(float(c["t0"]), float(c["sigma_t0"]), float(c["t1"]), float(c["sigma_t1"]))
        except KeyError as exc:
            raise SchemaError(f"{path}: constraints: missing field {exc}") from None
    problem = FitProblem(
        datasets,
        constraints,
        weighting=manifest.get("weighting", "poisson"),
        lifetime_mode=manifest.get("lifetime_mode", "soft"),
        fit_background=bool(manifest.get("fit_background", False)),
    )
    return problem, manifest.get("initial_guess")


def write_manifest(path, entries: list[dict], constraints: dict | None = None, **options) -> None:
    payload = {"datasets": entries}
    if constraints:
        payload["constraints"] = constraints
    payload.update(options)
    _write_json(path, payload)
