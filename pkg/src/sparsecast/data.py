"""CSV ingestion, ETT-style splits, normalization, windows and synthetic series."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataError",
    "DegenerateChannelError",
    "SeriesFrame",
    "Normalizer",
    "ForecastWindow",
    "load_csv",
    "write_csv",
    "split_ett",
    "SplitResult",
    "make_windows",
    "window_arrays",
    "synth_generate",
    "SINE_PERIODS",
]

# rows per 30-day month
ROWS_PER_MONTH = {"h": 30 * 24, "15min": 30 * 24 * 4}
SPLIT_MONTHS = (12, 4, 4)


class DataError(ValueError):
    pass


class DegenerateChannelError(DataError):
    pass


@dataclass
class SeriesFrame:
    values: np.ndarray  # (T, n)
    channel_names: list[str]
    timestamps: list[str] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"values must be a non-empty (T, n) table, got shape {self.values.shape}")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names length does not match the channel count")
        if self.timestamps is not None and len(self.timestamps) != self.values.shape[0]:
            raise DataError("timestamps length does not match the row count")
        if not np.all(np.isfinite(self.values)):
            raise DataError("values contain missing or non-finite entries")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return SeriesFrame(self.values[start:stop], list(self.channel_names), ts)


def load_csv(path: str | Path, has_timestamp_col: bool | None = None, fill: str = "reject") -> SeriesFrame:
    """Read a header-first CSV of numeric columns.

    ``has_timestamp_col=None`` treats a leading column named ``date`` as
    timestamps. ``fill="ffill"`` forward-fills empty cells; the default
    rejects them. Row numbers in errors count data rows from 1.
    """
    if fill not in ("reject", "ffill"):
        raise ValueError(f"fill must be 'reject' or 'ffill', got {fill!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if has_timestamp_col is None:
        has_timestamp_col = bool(header) and header[0].lower() == "date"
    first = 1 if has_timestamp_col else 0
    names = header[first:]
    if not names:
        raise DataError(f"{path}: no value columns")
    if len(rows) < 2:
        raise DataError(f"{path}: header but no data rows")

    values = np.empty((len(rows) - 1, len(names)))
    stamps = [] if has_timestamp_col else None
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        if stamps is not None:
            stamps.append(row[0].strip())
        for c, cell in enumerate(row[first:]):
            cell = cell.strip()
            col = c + first + 1
            if cell == "":
                if fill == "ffill" and r > 1:
                    values[r - 1, c] = values[r - 2, c]
                    continue
                raise DataError(f"{path}: missing value at row {r}, column {col} ({names[c]!r})")
            try:
                values[r - 1, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} at row {r}, column {col} ({names[c]!r})"
                ) from None
    return SeriesFrame(values, names, stamps)


def write_csv(frame: SeriesFrame, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = (["date"] if frame.timestamps is not None else []) + frame.channel_names
        w.writerow(head)
        for t in range(frame.T):
            row = [repr(float(v)) for v in frame.values[t]]
            if frame.timestamps is not None:
                row.insert(0, frame.timestamps[t])
            w.writerow(row)


@dataclass
class SplitResult:
    train: SeriesFrame
    val: SeriesFrame
    test: SeriesFrame
    proportional: bool = False  # True when the frame was too short for full months

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.train.T, self.val.T, self.test.T


def split_ett(frame: SeriesFrame, freq: str = "h") -> SplitResult:
    """12/4/4-month train/val/test split with 30-day months.

    Frames shorter than 20 months are cut 12:4:4 proportionally and the
    result is flagged ``proportional``.
    """
    if freq not in ROWS_PER_MONTH:
        raise ValueError(f"freq must be one of {sorted(ROWS_PER_MONTH)}, got {freq!r}")
    T = frame.T
    if T < 3:
        raise DataError(f"need at least 3 rows to split, got {T}")
    month = ROWS_PER_MONTH[freq]
    n_train, n_val, n_test = (m * month for m in SPLIT_MONTHS)
    proportional = T < n_train + n_val + n_test
    if proportional:
        total = sum(SPLIT_MONTHS)
        n_val = max(1, T * SPLIT_MONTHS[1] // total)
        n_test = max(1, T * SPLIT_MONTHS[2] // total)
        n_train = T - n_val - n_test
    a, b = n_train, n_train + n_val
    return SplitResult(frame.slice(0, a), frame.slice(a, b), frame.slice(b, b + n_test), proportional)


@dataclass
class Normalizer:
    """Per-channel z-score fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frame: SeriesFrame) -> "Normalizer":
        mean = frame.values.mean(axis=0)
        std = frame.values.std(axis=0)
        bad = [frame.channel_names[i] for i in np.flatnonzero(std <= 0)]
        if bad:
            raise DegenerateChannelError(f"channels with zero variance in the training split: {bad}")
        return cls(mean, std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class ForecastWindow:
    start: int  # row of the first lookback step within the source frame
    lookback: np.ndarray  # (L, n)
    horizon_target: np.ndarray  # (S, n)
    normalization: Normalizer | None = field(default=None, repr=False)

    @property
    def lookback_rows(self) -> range:
        return range(self.start, self.start + self.lookback.shape[0])

    @property
    def horizon_rows(self) -> range:
        end = self.start + self.lookback.shape[0]
        return range(end, end + self.horizon_target.shape[0])


def _window_count(T: int, L: int, S: int, stride: int) -> int:
    for name, v in (("L", L), ("S", S), ("stride", stride)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return 0 if T < L + S else (T - L - S) // stride + 1


def make_windows(
    frame: SeriesFrame, L: int, S: int, stride: int = 1, normalizer: Normalizer | None = None
) -> list[ForecastWindow]:
    """Sliding (lookback, horizon) pairs; values are normalized when a normalizer is given."""
    count = _window_count(frame.T, L, S, stride)
    vals = frame.values if normalizer is None else normalizer.normalize(frame.values)
    out = []
    for k in range(count):
        s = k * stride
        out.append(ForecastWindow(s, vals[s:s + L], vals[s + L:s + L + S], normalizer))
    return out


def window_arrays(
    frame: SeriesFrame, L: int, S: int, stride: int = 1, normalizer: Normalizer | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows as ``(N, L, n)`` inputs and ``(N, S, n)`` targets."""
    count = _window_count(frame.T, L, S, stride)
    n = frame.n
    if count == 0:
        return np.empty((0, L, n)), np.empty((0, S, n))
    vals = frame.values if normalizer is None else normalizer.normalize(frame.values)
    starts = np.arange(count) * stride
    x = np.stack([vals[s:s + L] for s in starts])
    y = np.stack([vals[s + L:s + L + S] for s in starts])
    return x, y


# ------------------------------------------------------------------ synthetic

SINE_PERIODS = (12, 24, 48)  # every period divides 48, so the mix repeats every 48 steps
SYNTH_KINDS = ("sine_mix", "trend_season", "random_walk")


def _timestamps(T: int, start: str = "2016-07-01 00:00:00") -> list[str]:
    t0 = dt.datetime.fromisoformat(start)
    return [(t0 + dt.timedelta(hours=h)).isoformat(sep=" ") for h in range(T)]


def synth_generate(
    kind: str,
    T: int,
    n: int,
    seed: int = 0,
    noise: float = 0.1,
    periods: Sequence[int] = SINE_PERIODS,
    step_scale: float = 1.0,
) -> SeriesFrame:
    """Seeded synthetic hourly series.

    ``sine_mix``: per channel, sum over ``periods`` of
    ``a * sin(2 pi t / p + phi)`` with ``a ~ U(0.5, 2)`` and
    ``phi ~ U(0, 2 pi)`` drawn as an ``(n, len(periods))`` block each,
    plus ``noise * N(0, 1)``.
    ``trend_season``: slope ``~ U(-0.01, 0.01)`` per channel times ``t``
    plus a 24-step sine of amplitude ``~ U(0.5, 2)``, plus noise.
    ``random_walk``: cumulative sum of ``step_scale * N(0, 1)`` increments,
    drawn as one ``(T, n)`` block from ``default_rng(seed)``.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"kind must be one of {SYNTH_KINDS}, got {kind!r}")
    if T < 1 or n < 1:
        raise ValueError("T and n must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)[:, None]
    if kind == "random_walk":
        values = np.cumsum(step_scale * rng.standard_normal((T, n)), axis=0)
    elif kind == "sine_mix":
        periods = np.asarray(periods, dtype=np.float64)
        amp = rng.uniform(0.5, 2.0, size=(n, periods.size))
        phase = rng.uniform(0.0, 2 * math.pi, size=(n, periods.size))
        values = np.zeros((T, n))
        for j, p in enumerate(periods):
            values += amp[:, j] * np.sin(2 * math.pi * t / p + phase[:, j])
        values += noise * rng.standard_normal((T, n))
    else:
        slope = rng.uniform(-0.01, 0.01, size=n)
        amp = rng.uniform(0.5, 2.0, size=n)
        values = slope * t + amp * np.sin(2 * math.pi * t / 24.0)
        values += noise * rng.standard_normal((T, n))
    return SeriesFrame(values, [f"ch{i}" for i in range(n)], _timestamps(T))
