"""Dataset ingestion, chronological splits, and window construction.

CSV format: header row, first column named ``date`` (ISO-8601 timestamps),
remaining columns numeric, UTF-8, comma-separated. Multivariate series are
flattened channel-independently: every channel contributes its own univariate
windows.

Normalization is two-stage: channels are z-scored with statistics of the
training split, and each window additionally carries its own input mean/std
for instance normalization inside the backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .backbone import STD_FLOOR, ForecastWindow

__all__ = [
    "DataError",
    "SeriesTable",
    "SplitSpec",
    "load_csv",
    "save_csv",
    "split_borders",
    "make_windows",
    "windows_from_array",
    "synth_piecewise",
    "table_from_array",
]

SPLIT_NAMES = ("train", "val", "test")

# Standard fixed-month borders for the transformer-temperature datasets:
# 12/4/4 months of 30 days, at hourly or 15-minute sampling.
ETT_MONTH_ROWS = {"ett_hour": 30 * 24, "ett_minute": 30 * 24 * 4}


class DataError(ValueError):
    """Raised for ingestion and windowing failures (CLI exit code 3)."""


@dataclass(frozen=True)
class SeriesTable:
    """Aligned multivariate series: ordered timestamps plus named channels."""

    timestamps: np.ndarray
    channels: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        n = self.timestamps.size
        if n < 1:
            raise DataError("series table is empty")
        for name, col in self.channels.items():
            if col.size != n:
                raise DataError(f"channel {name!r} length mismatch")
            if not np.isfinite(col).all():
                raise DataError(f"channel {name!r} contains non-finite values")
        if n > 1 and not (np.diff(self.timestamps.astype("int64")) > 0).all():
            raise DataError("timestamps must be strictly increasing")

    @property
    def num_steps(self) -> int:
        return int(self.timestamps.size)

    @property
    def channel_names(self) -> list[str]:
        return list(self.channels.keys())

    @property
    def num_channels(self) -> int:
        return len(self.channels)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test split definition.

    ``ratio`` mode slices by the given fractions; the ``ett_*`` modes use the
    standard fixed-month borders of the transformer-temperature benchmark.
    Splits are disjoint and windows never cross a border.
    """

    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    mode: str = "ratio"

    def __post_init__(self) -> None:
        if self.mode not in ("ratio", *ETT_MONTH_ROWS):
            raise DataError(f"unknown split mode {self.mode!r}")
        ratios = tuple(float(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        if any(r <= 0 for r in ratios):
            raise DataError("split ratios must be positive")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError("split ratios must sum to 1")


def load_csv(path) -> SeriesTable:
    """Parse a conforming CSV; malformed rows are reported by line number."""
    try:
        frame = pd.read_csv(path, dtype=str)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path}: empty file") from exc
    if frame.shape[1] < 2:
        raise DataError(f"{path}: need a date column plus at least one channel")
    if frame.columns[0] != "date":
        raise DataError(f"{path}: first column must be named 'date'")
    if len(frame) == 0:
        raise DataError(f"{path}: no data rows")
    stamps = pd.to_datetime(frame.iloc[:, 0], errors="coerce", format="mixed")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        raise DataError(f"{path}: malformed timestamp at data row {bad[0] + 1}")
    channels: dict[str, np.ndarray] = {}
    for name in frame.columns[1:]:
        col = pd.to_numeric(frame[name], errors="coerce")
        bad = np.flatnonzero(col.isna().to_numpy())
        if bad.size:
            raise DataError(
                f"{path}: malformed value in column {name!r} at data row {bad[0] + 1}"
            )
        channels[str(name)] = col.to_numpy(dtype=np.float64)
    ts = stamps.to_numpy()
    if len(ts) > 1 and not (np.diff(ts.astype("int64")) > 0).all():
        raise DataError(f"{path}: timestamps must be strictly increasing")
    return SeriesTable(timestamps=ts, channels=channels)


def save_csv(table: SeriesTable, path) -> None:
    frame = pd.DataFrame(
        {"date": pd.to_datetime(table.timestamps), **table.channels}
    )
    frame.to_csv(path, index=False)


def split_borders(
    num_steps: int, spec: SplitSpec
) -> dict[str, tuple[int, int]]:
    """Half-open row ranges for each split, chronologically ordered."""
    if spec.mode == "ratio":
        n_train = int(num_steps * spec.ratios[0])
        n_val = int(num_steps * spec.ratios[1])
        edges = (0, n_train, n_train + n_val, num_steps)
    else:
        month = ETT_MONTH_ROWS[spec.mode]
        edges = (
            0,
            min(12 * month, num_steps),
            min(16 * month, num_steps),
            min(20 * month, num_steps),
        )
    return {
        name: (edges[i], edges[i + 1]) for i, name in enumerate(SPLIT_NAMES)
    }


def windows_from_array(
    x: np.ndarray,
    lookback: int,
    horizon: int,
    stride: int = 1,
    channel_id: int = 0,
) -> list[ForecastWindow]:
    """Stride-``stride`` windows over a univariate array."""
    x = np.asarray(x, dtype=np.float64)
    last_start = x.size - lookback - horizon
    if last_start < 0:
        raise DataError(
            f"series of length {x.size} too short for lookback {lookback} "
            f"+ horizon {horizon}"
        )
    windows = []
    for start in range(0, last_start + 1, stride):
        windows.append(
            ForecastWindow.from_arrays(
                x[start : start + lookback],
                x[start + lookback : start + lookback + horizon],
                channel_id=channel_id,
            )
        )
    return windows


def make_windows(
    table: SeriesTable,
    lookback: int,
    horizon: int,
    split: str,
    spec: SplitSpec,
    stride: int = 1,
    normalize_by_train: bool = True,
) -> list[ForecastWindow]:
    """Channel-independent windows fully contained in one chronological split."""
    if split not in SPLIT_NAMES:
        raise DataError(f"unknown split {split!r}")
    borders = split_borders(table.num_steps, spec)
    lo, hi = borders[split]
    if hi - lo < lookback + horizon:
        raise DataError(
            f"split {split!r} has {hi - lo} rows, needs at least "
            f"{lookback + horizon}"
        )
    train_lo, train_hi = borders["train"]
    windows: list[ForecastWindow] = []
    for cid, name in enumerate(table.channel_names):
        col = table.channels[name]
        if normalize_by_train:
            mean = col[train_lo:train_hi].mean()
            std = max(col[train_lo:train_hi].std(), STD_FLOOR)
            col = (col - mean) / std
        windows.extend(
            windows_from_array(
                col[lo:hi], lookback, horizon, stride=stride, channel_id=cid
            )
        )
    return windows


def synth_piecewise(
    n_segments: int,
    seg_len_range: tuple[int, int],
    noise_sigma: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[int]]:
    """Piecewise-constant levels with Gaussian noise, plus change indices.

    Segment lengths are uniform over the inclusive range; the returned change
    points are the first index of every segment after the initial one.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    lo, hi = seg_len_range
    if not 1 <= lo <= hi:
        raise ValueError("invalid segment length range")
    lengths = rng.integers(lo, hi + 1, size=n_segments)
    levels = rng.normal(0.0, 1.0, size=n_segments)
    series = np.repeat(levels, lengths)
    if noise_sigma > 0:
        series = series + rng.normal(0.0, noise_sigma, size=series.size)
    changes = np.cumsum(lengths)[:-1].tolist()
    return series, changes


def table_from_array(
    x: np.ndarray, name: str = "value", start: str = "2020-01-01", freq: str = "h"
) -> SeriesTable:
    """Wrap a univariate array in a SeriesTable with synthetic hourly stamps."""
    x = np.asarray(x, dtype=np.float64)
    stamps = pd.date_range(start=start, periods=x.size, freq=freq).to_numpy()
    return SeriesTable(timestamps=stamps, channels={name: x})
