"""Ingestion, normalization, windowing, and batching of multi-sensor series.

Two on-disk formats are supported:

* CSV: header ``sensor_0,...,sensor_{N-1}``, one row per 5-minute (or
  configured) step, with a JSON sidecar ``<stem>.meta.json`` holding
  ``start_timestamp`` (ISO-8601), ``step_minutes`` and ``name``.
* Binary: magic ``FPTN``, version u16, then T_total/N/C as u64, little-endian
  float64 values in (t, n, c) row-major order, then a u64-length-prefixed
  JSON metadata block.

The pipeline is: load raw -> fit z-score statistics on the training portion
only -> normalize -> cut stride-1 sliding windows -> split chronologically.
Time features (day-of-week, hour-of-day, minute-of-hour, each min-max
scaled to [0, 1]) are derived from each window's input steps and are
identical across the sensor rows of one sample.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, IngestionError, NormalizationError,
                     WindowingError)

BINARY_MAGIC = b"FPTN"
BINARY_VERSION = 1

SPLIT_PRESETS = ("6:2:2", "7:1:2")


@dataclass
class RawSeries:
    """The full observed series: (T_total, N, 1) values plus a time axis."""

    values: np.ndarray
    start_timestamp: datetime
    step_minutes: int
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or self.values.shape[2] != 1:
            raise IngestionError(f"series values must be (T_total, N, 1), got {self.values.shape}")
        if self.values.shape[1] < 1:
            raise IngestionError("series needs at least one sensor")
        if np.isnan(self.values).any():
            raise IngestionError("series contains NaN values after ingestion")
        if self.step_minutes <= 0:
            raise IngestionError(f"step_minutes must be positive, got {self.step_minutes}")

    @property
    def total_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    def timestamp(self, index: int) -> datetime:
        return self.start_timestamp + timedelta(minutes=self.step_minutes * index)


@dataclass(frozen=True)
class NormStats:
    """Z-score statistics fit on the training portion (population std)."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise NormalizationError(f"z-score std must be positive, got {self.std}")


def fit_zscore(train_values: np.ndarray) -> NormStats:
    values = np.asarray(train_values, dtype=np.float64)
    std = float(values.std())
    if std == 0.0:
        raise NormalizationError("training series is constant; z-score undefined")
    return NormStats(mean=float(values.mean()), std=std)


def apply_zscore(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def invert_zscore(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# calendar features
# ---------------------------------------------------------------------------

def time_feature_table(start: datetime, step_minutes: int, total_steps: int) -> np.ndarray:
    """(total_steps, 3) table of scaled (day-of-week, hour, minute) per step.

    Scales: day_of_week/6 with Monday = 0, hour/23, minute/55 (the 5-minute
    grid maximum), so every feature lies in [0, 1] for on-grid data.
    """
    out = np.empty((total_steps, 3))
    t = start
    delta = timedelta(minutes=step_minutes)
    for i in range(total_steps):
        out[i, 0] = t.weekday() / 6.0
        out[i, 1] = t.hour / 23.0
        out[i, 2] = t.minute / 55.0
        t = t + delta
    return out


def build_time_features(start: datetime, step_minutes: int,
                        window_start: int, input_steps: int) -> np.ndarray:
    """One (3T,) feature row for the window starting at ``window_start``:
    [D_1..D_T, H_1..H_T, M_1..M_T]."""
    table = time_feature_table(start + timedelta(minutes=step_minutes * window_start),
                               step_minutes, input_steps)
    return np.concatenate([table[:, 0], table[:, 1], table[:, 2]])


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One training example: inputs (N, T), targets (N, K), time rows (N, 3T)."""

    x: np.ndarray
    y: np.ndarray
    tf: np.ndarray


class SampleSet:
    """Chronologically ordered sliding windows over one normalized series.

    Windows are stored as start indices against the shared series array; X
    and Y are materialized on access, and the per-window (3T,) time-feature
    row is replicated across the N sensor rows then. Immutable after
    construction, so parallel readers are safe.
    """

    def __init__(self, series: np.ndarray, starts: np.ndarray, input_steps: int,
                 horizon: int, tf_rows: np.ndarray, stats: NormStats):
        self.series = series                      # (T_total, N), normalized
        self.starts = np.asarray(starts, dtype=np.int64)
        self.input_steps = input_steps
        self.horizon = horizon
        self.tf_rows = tf_rows                    # (len(self), 3T)
        self.stats = stats

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n_sensors(self) -> int:
        return self.series.shape[1]

    def __getitem__(self, i: int) -> Sample:
        x, y, tf = self.batch(np.asarray([i]))
        return Sample(x=x[0], y=y[0], tf=tf[0])

    def batch(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Materialize (X, Y, TF) arrays for the given sample indices."""
        t, k = self.input_steps, self.horizon
        starts = self.starts[indices]
        offs_x = starts[:, None] + np.arange(t)[None, :]          # (b, T)
        offs_y = starts[:, None] + t + np.arange(k)[None, :]      # (b, K)
        x = self.series[offs_x].transpose(0, 2, 1)                # (b, N, T)
        y = self.series[offs_y].transpose(0, 2, 1)                # (b, N, K)
        tf = np.broadcast_to(self.tf_rows[indices][:, None, :],
                             (len(starts), self.n_sensors, 3 * t)).copy()
        return x, y, tf

    def slice(self, start: int, stop: int) -> "SampleSet":
        return SampleSet(self.series, self.starts[start:stop], self.input_steps,
                         self.horizon, self.tf_rows[start:stop], self.stats)


def window_count(total_steps: int, input_steps: int, horizon: int) -> int:
    return total_steps - input_steps - horizon + 1


def make_windows(series: RawSeries, stats: NormStats, input_steps: int,
                 horizon: int) -> SampleSet:
    """Stride-1 sliding windows over an already normalized series.

    X covers steps [t, t+T), Y covers [t+T, t+T+K); the time-feature row is
    built from X's steps (the information available at prediction time).
    """
    n = window_count(series.total_steps, input_steps, horizon)
    if n < 1:
        raise WindowingError(
            f"series of {series.total_steps} steps is too short for "
            f"input_steps={input_steps} + horizon={horizon}")
    table = time_feature_table(series.start_timestamp, series.step_minutes,
                               series.total_steps)
    windows = np.lib.stride_tricks.sliding_window_view(table[:, :], input_steps, axis=0)
    # windows: (T_total - T + 1, 3, T); row t -> [D block, H block, M block]
    tf_rows = windows[:n].reshape(n, 3 * input_steps)
    return SampleSet(series.values[:, :, 0], np.arange(n), input_steps, horizon,
                     np.ascontiguousarray(tf_rows), stats)


def parse_split_ratio(ratio) -> tuple[float, float, float]:
    """Normalize a ratio spec ('a:b:c' string or numeric triple summing to 1)."""
    if isinstance(ratio, str):
        try:
            weights = [int(part) for part in ratio.split(":")]
        except ValueError:
            weights = []
        if len(weights) != 3 or any(w <= 0 for w in weights):
            raise ConfigurationError(
                f"split ratio string must look like '6:2:2' with positive integers, got {ratio!r}")
        total = sum(weights)
        return tuple(w / total for w in weights)
    triple = tuple(float(r) for r in ratio)
    if len(triple) != 3 or any(r <= 0 for r in triple) or abs(sum(triple) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratio must be three positive fractions summing to 1, got {ratio}")
    return triple


def split_counts(total: int, ratio) -> tuple[int, int, int]:
    """floor(r * total) for train and val, remainder to test.

    Integer-weight ratio strings are floored exactly in integer arithmetic;
    float triples get a tiny guard against representation error.
    """
    if isinstance(ratio, str):
        parse_split_ratio(ratio)  # validates
        weights = [int(part) for part in ratio.split(":")]
        denom = sum(weights)
        n_train = weights[0] * total // denom
        n_val = weights[1] * total // denom
    else:
        r_train, r_val, _ = parse_split_ratio(ratio)
        n_train = int(r_train * total + 1e-9)
        n_val = int(r_val * total + 1e-9)
    return n_train, n_val, total - n_train - n_val


def split_samples(samples: SampleSet, ratio="6:2:2") -> tuple[SampleSet, SampleSet, SampleSet]:
    """Chronological contiguous split by sample index; no shuffling."""
    n_train, n_val, n_test = split_counts(len(samples), ratio)
    if min(n_train, n_val, n_test) < 1:
        raise ConfigurationError(
            f"split {ratio} of {len(samples)} samples leaves an empty part "
            f"({n_train}/{n_val}/{n_test})")
    return (samples.slice(0, n_train),
            samples.slice(n_train, n_train + n_val),
            samples.slice(n_train + n_val, len(samples)))


def iterate_batches(split: SampleSet, batch_size: int, shuffle: bool = False, seed=0):
    """Yield (X, Y, TF) batches; the last partial batch is included.

    Shuffling draws one permutation up front from a generator seeded with
    ``seed``, so the epoch order is reproducible and consumers may read in
    parallel.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(split))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(split))
    for lo in range(0, len(split), batch_size):
        yield split.batch(order[lo:lo + batch_size])


def training_extent(total_steps: int, input_steps: int, horizon: int, ratio) -> int:
    """Number of leading raw steps visible to the training samples (X and Y)."""
    n_train, _, _ = split_counts(window_count(total_steps, input_steps, horizon), ratio)
    return n_train - 1 + input_steps + horizon


def prepare_dataset(raw: RawSeries, input_steps: int, horizon: int, ratio="6:2:2"):
    """Canonical pipeline: fit stats on the training portion, normalize,
    window, split. Returns (train, val, test, stats)."""
    n = window_count(raw.total_steps, input_steps, horizon)
    if n < 1:
        raise WindowingError(
            f"series of {raw.total_steps} steps is too short for "
            f"input_steps={input_steps} + horizon={horizon}")
    extent = training_extent(raw.total_steps, input_steps, horizon, ratio)
    stats = fit_zscore(raw.values[:extent])
    normalized = RawSeries(apply_zscore(raw.values, stats), raw.start_timestamp,
                           raw.step_minutes, raw.name)
    samples = make_windows(normalized, stats, input_steps, horizon)
    train, val, test = split_samples(samples, ratio)
    return train, val, test, stats


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _metadata_dict(series: RawSeries) -> dict:
    return {
        "start_timestamp": series.start_timestamp.isoformat(),
        "step_minutes": series.step_minutes,
        "name": series.name,
    }


def _series_from_metadata(values: np.ndarray, meta: dict, source: str) -> RawSeries:
    try:
        start = datetime.fromisoformat(meta["start_timestamp"])
        step = int(meta["step_minutes"])
        name = str(meta.get("name", ""))
    except (KeyError, ValueError, TypeError) as exc:
        raise IngestionError(f"{source}: invalid metadata: {exc}") from exc
    return RawSeries(values=values, start_timestamp=start, step_minutes=step, name=name)


def save_csv(series: RawSeries, path) -> None:
    path = Path(path)
    header = ",".join(f"sensor_{i}" for i in range(series.n_sensors))
    np.savetxt(path, series.values[:, :, 0], delimiter=",", header=header,
               comments="", fmt="%.17g")
    _sidecar_path(path).write_text(
        json.dumps(_metadata_dict(series), indent=2, sort_keys=True))


def _locate_bad_cell(path: Path, n_cols: int) -> IngestionError:
    """Slow scan after a fast-path failure; returns an error naming the cell."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if line_no == 1:
                continue
            if len(row) != n_cols:
                return IngestionError(
                    f"{path}: line {line_no} has {len(row)} columns, expected {n_cols}")
            for col_no, cell in enumerate(row):
                try:
                    float(cell)
                except ValueError:
                    return IngestionError(
                        f"{path}: non-numeric cell {cell!r} at line {line_no}, "
                        f"column {col_no + 1} ({'sensor_%d' % col_no})")
    return IngestionError(f"{path}: failed to parse as CSV")


def load_csv(path) -> RawSeries:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise IngestionError(f"{path}: metadata sidecar {sidecar.name} is missing")
    with open(path) as fh:
        header = fh.readline().strip()
    columns = header.split(",") if header else []
    expected = [f"sensor_{i}" for i in range(len(columns))]
    if not columns or columns != expected:
        raise IngestionError(f"{path}: header must be sensor_0,...,sensor_{{N-1}}, got {header!r}")
    try:
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError:
        raise _locate_bad_cell(path, len(columns)) from None
    if values.shape[1] != len(columns):
        raise IngestionError(
            f"{path}: {values.shape[1]} value columns do not match {len(columns)} header columns")
    if np.isnan(values).any():
        t, n = map(int, np.argwhere(np.isnan(values))[0])
        raise IngestionError(f"{path}: NaN value at line {t + 2}, column {n + 1}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{sidecar}: invalid JSON: {exc}") from exc
    return _series_from_metadata(values, meta, str(path))


def save_binary(series: RawSeries, path) -> None:
    path = Path(path)
    meta = json.dumps(_metadata_dict(series), sort_keys=True).encode()
    t_total, n, c = series.values.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<H", BINARY_VERSION))
        fh.write(struct.pack("<QQQ", t_total, n, c))
        fh.write(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)


def load_binary(path) -> RawSeries:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    blob = path.read_bytes()
    if blob[:4] != BINARY_MAGIC:
        raise IngestionError(f"{path}: bad magic bytes {blob[:4]!r}, expected {BINARY_MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != BINARY_VERSION:
            raise IngestionError(f"{path}: unsupported version {version}")
        t_total, n, c = struct.unpack_from("<QQQ", blob, 6)
        offset = 6 + 24
        nbytes = t_total * n * c * 8
        values = np.frombuffer(blob, dtype="<f8", count=t_total * n * c,
                               offset=offset).reshape(t_total, n, c).copy()
        offset += nbytes
        (meta_len,) = struct.unpack_from("<Q", blob, offset)
        meta = json.loads(blob[offset + 8: offset + 8 + meta_len].decode())
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: truncated or corrupt binary dataset: {exc}") from exc
    return _series_from_metadata(values, meta, str(path))


def load_raw(path, format: str) -> RawSeries:
    """Load a dataset in the named format ('csv' or 'fptn' binary)."""
    if format == "csv":
        return load_csv(path)
    if format in ("fptn", "binary"):
        return load_binary(path)
    raise ConfigurationError(f"unknown dataset format {format!r}; use 'csv' or 'fptn'")
