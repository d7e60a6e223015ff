"""Hourly PV / wind / load / price profiles.

Reading and writing the CSV format, outlier cleaning, the monthly
train/test split and the noisy synthetic generator.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np
import pandas as pd

CSV_COLUMNS = ("timestamp", "pv_kw", "wt_kw", "load_kw", "lmp")
SERIES = ("pv_kw", "wt_kw", "load_kw", "price")
HOURS_PER_DAY = 24

_HOUR = np.timedelta64(1, "h")


class ProfileError(ValueError):
    """Raised when a profile (or a CSV holding one) violates the schema."""


class ProfileSchemaError(ProfileError):
    pass


class ProfileParseError(ProfileError):
    pass


class ProfileValidationError(ProfileError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeriesProfile:
    """Equal-length hourly sequences driving the environment.

    Consecutive timestamps are one hour apart. The only gaps allowed are
    whole missing days (both neighbours aligned on midnight), which is
    what the monthly train/test split produces.
    """

    timestamps: np.ndarray
    pv_kw: np.ndarray
    wt_kw: np.ndarray
    load_kw: np.ndarray
    price: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[h]")
        object.__setattr__(self, "timestamps", ts)
        for name in SERIES:
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ts.setflags(write=False)
        _validate(self)

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesProfile):
            return NotImplemented
        return np.array_equal(self.timestamps, other.timestamps) and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in SERIES
        )

    @property
    def rdg_kw(self) -> np.ndarray:
        return self.pv_kw + self.wt_kw

    def slice(self, start: int, stop: int) -> "TimeSeriesProfile":
        return TimeSeriesProfile(
            self.timestamps[start:stop], *(getattr(self, n)[start:stop] for n in SERIES)
        )

    def replace(self, **series) -> "TimeSeriesProfile":
        kw = {n: getattr(self, n) for n in SERIES}
        kw.update(series)
        return TimeSeriesProfile(self.timestamps, **kw)

    def n_days(self) -> int:
        return len(self) // HOURS_PER_DAY

    def day(self, i: int) -> "TimeSeriesProfile":
        """The i-th 24-hour block, counted from the first row."""
        if not 0 <= i < self.n_days():
            raise IndexError(f"day {i} out of range (profile has {self.n_days()} days)")
        return self.slice(i * HOURS_PER_DAY, (i + 1) * HOURS_PER_DAY)

    def days(self) -> Iterator["TimeSeriesProfile"]:
        for i in range(self.n_days()):
            yield self.day(i)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "timestamp": pd.DatetimeIndex(self.timestamps.astype("datetime64[ns]")),
                "pv_kw": self.pv_kw,
                "wt_kw": self.wt_kw,
                "load_kw": self.load_kw,
                "lmp": self.price,
            }
        )


def _validate(p: TimeSeriesProfile) -> None:
    n = len(p.timestamps)
    for name in SERIES:
        arr = getattr(p, name)
        if arr.ndim != 1 or len(arr) != n:
            raise ProfileValidationError(f"{name} has length {len(arr)}, expected {n}")
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise ProfileValidationError(f"{name} is not finite at row {bad[0]}")
    if n < HOURS_PER_DAY:
        raise ProfileValidationError(f"profile needs at least {HOURS_PER_DAY} rows, got {n}")
    for name in ("pv_kw", "wt_kw", "load_kw"):
        neg = np.flatnonzero(getattr(p, name) < 0)
        if neg.size:
            raise ProfileValidationError(f"negative {name} at row {neg[0]}")
    step = np.diff(p.timestamps)
    off = np.flatnonzero(step != _HOUR)
    for i in off:
        a, b = p.timestamps[i], p.timestamps[i + 1]
        gap_ok = (
            b > a
            and _hour_of_day(b) == 0
            and _hour_of_day(a) == HOURS_PER_DAY - 1
        )
        if not gap_ok:
            raise ProfileValidationError(
                f"timestamps not hourly between row {i} ({a}) and row {i + 1} ({b})"
            )


def _hour_of_day(t: np.datetime64) -> int:
    return int((t - t.astype("datetime64[D]")) / _HOUR)


def load_csv(path: Union[str, Path]) -> TimeSeriesProfile:
    """Read a profile from ``timestamp,pv_kw,wt_kw,load_kw,lmp``.

    Row indices in error messages count data rows from 0, header excluded.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ProfileSchemaError(f"{path}: empty file") from None
        for col in CSV_COLUMNS:
            if col not in header:
                raise ProfileSchemaError(f"{path}: missing column {col!r}")
        idx = [header.index(c) for c in CSV_COLUMNS]
        stamps, values = [], []
        for row_no, row in enumerate(reader):
            if not row:
                continue
            try:
                cells = [row[i] for i in idx]
            except IndexError:
                raise ProfileParseError(f"{path}: row {row_no} has {len(row)} fields") from None
            try:
                stamps.append(np.datetime64(cells[0].strip(), "h"))
            except ValueError:
                raise ProfileParseError(
                    f"{path}: row {row_no}: bad timestamp {cells[0]!r}"
                ) from None
            try:
                values.append([float(c) for c in cells[1:]])
            except ValueError:
                raise ProfileParseError(f"{path}: row {row_no}: non-numeric value") from None
    if not values:
        raise ProfileValidationError(f"{path}: no data rows")
    data = np.asarray(values, dtype=float)
    return TimeSeriesProfile(np.array(stamps), *data.T)


def from_frame(frame: pd.DataFrame) -> TimeSeriesProfile:
    """Profile from a frame with the CSV columns (``timestamp`` may be the index)."""
    if "timestamp" not in frame.columns and frame.index.name == "timestamp":
        frame = frame.reset_index()
    for col in CSV_COLUMNS:
        if col not in frame.columns:
            raise ProfileSchemaError(f"missing column {col!r}")
    stamps = pd.to_datetime(frame["timestamp"]).to_numpy().astype("datetime64[h]")
    values = [frame[c].to_numpy(dtype=float) for c in CSV_COLUMNS[1:]]
    return TimeSeriesProfile(stamps, *values)


def write_csv(profile: TimeSeriesProfile, path: Union[str, Path]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, t in enumerate(profile.timestamps):
            w.writerow(
                [
                    str(t.astype("datetime64[m]")),
                    repr(float(profile.pv_kw[i])),
                    repr(float(profile.wt_kw[i])),
                    repr(float(profile.load_kw[i])),
                    repr(float(profile.price[i])),
                ]
            )


def _clean_series(x: np.ndarray, z_threshold: float, window: int) -> np.ndarray:
    s = pd.Series(x)
    med = s.rolling(window, center=True, min_periods=1).median().to_numpy()
    # Spread of the neighbours only, so a lone spike cannot inflate its own threshold.
    roll_sum = s.rolling(window, center=True, min_periods=1).sum().to_numpy()
    roll_sq = (s**2).rolling(window, center=True, min_periods=1).sum().to_numpy()
    roll_n = s.rolling(window, center=True, min_periods=1).count().to_numpy()
    n = roll_n - 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_nb = (roll_sum - x) / n
        var_nb = np.maximum((roll_sq - x**2) / n - mean_nb**2, 0.0)
    std_nb = np.where(n > 0, np.sqrt(var_nb), 0.0)
    outlier = np.abs(x - med) > z_threshold * std_nb
    cleaned = np.where(outlier, med, x)
    return pd.Series(cleaned).rolling(3, center=True, min_periods=1).mean().to_numpy()


def preprocess(
    profile: TimeSeriesProfile, z_threshold: float = 3.0, window: int = 5
) -> TimeSeriesProfile:
    """Replace rolling-median outliers, then smooth with a width-3 moving average.

    A value is an outlier when it sits more than ``z_threshold`` standard
    deviations (of the other values in its centred window) away from the
    centred rolling median. Outliers are replaced by that median. Partial
    windows are used at the ends of the series.
    """
    if not z_threshold > 0:
        raise ValueError("z_threshold must be positive")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if len(profile) < window:
        raise ValueError(f"profile of length {len(profile)} is shorter than window {window}")
    out = {}
    for name in SERIES:
        out[name] = np.maximum(_clean_series(getattr(profile, name), z_threshold, window), 0.0)
    return profile.replace(**out)


def _keep_rows(profile: TimeSeriesProfile, mask: np.ndarray) -> TimeSeriesProfile:
    return TimeSeriesProfile(profile.timestamps[mask], *(getattr(profile, n)[mask] for n in SERIES))


def split_train_test(profile: TimeSeriesProfile) -> tuple[TimeSeriesProfile, TimeSeriesProfile]:
    """Per calendar month: days 1-21 train, days 22-28 test, the rest dropped.

    Only complete 24-hour days are kept.
    """
    ts = profile.timestamps
    day_start = ts.astype("datetime64[D]")
    month = ts.astype("datetime64[M]")
    dom = (day_start - month.astype("datetime64[D]")).astype(int) + 1

    first = month[0]
    first_days = np.unique(day_start[(month == first) & (dom <= 28)])
    complete_first = [d for d in first_days if np.count_nonzero(day_start == d) == HOURS_PER_DAY]
    if len(complete_first) < 28:
        raise ValueError(
            f"profile covers {len(complete_first)} complete days of days 1-28 in its first month; 28 needed"
        )

    uniq, counts = np.unique(day_start, return_counts=True)
    complete = np.isin(day_start, uniq[counts == HOURS_PER_DAY])
    train = complete & (dom <= 21)
    test = complete & (dom >= 22) & (dom <= 28)
    return _keep_rows(profile, train), _keep_rows(profile, test)


def synthesize(nominal: TimeSeriesProfile, noise_frac: float = 0.2, seed: int = 0) -> TimeSeriesProfile:
    """Multiplicative white noise: ``max(0, v * (1 + noise_frac * xi))``."""
    if not 0 <= noise_frac < 1:
        raise ValueError("noise_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((len(SERIES), len(nominal)))
    out = {}
    for j, name in enumerate(SERIES):
        v = getattr(nominal, name)
        out[name] = np.maximum(0.0, v * (1.0 + noise_frac * xi[j]))
    return nominal.replace(**out)


def nominal_profile(start: str = "2024-01-01", n_days: int = 31) -> TimeSeriesProfile:
    """Deterministic daily shapes used as the base for synthetic data.

    PV is a half-sine between 06:00 and 18:00 peaking at 160 kW, wind is a
    slow sinusoid around 60 kW, load has morning and evening peaks between
    roughly 120 and 280 kW, and the price follows the load with an evening
    peak (0.04 to 0.24 per kWh). Magnitudes are per microgrid.
    """
    t0 = np.datetime64(start, "h")
    ts = t0 + np.arange(n_days * HOURS_PER_DAY) * _HOUR
    h = np.arange(len(ts)) % HOURS_PER_DAY
    d = np.arange(len(ts)) // HOURS_PER_DAY

    pv = np.where((h >= 6) & (h <= 18), 160.0 * np.sin(np.pi * (h - 6) / 12.0), 0.0)
    pv = np.maximum(pv, 0.0)
    wt = 60.0 + 30.0 * np.sin(2 * np.pi * (h + 3) / 24.0) + 15.0 * np.sin(2 * np.pi * d / 7.0)
    load = (
        150.0
        + 60.0 * np.exp(-((h - 8.0) ** 2) / 6.0)
        + 120.0 * np.exp(-((h - 19.0) ** 2) / 8.0)
        - 30.0 * np.exp(-((h - 3.0) ** 2) / 8.0)
    )
    price = (
        0.05
        + 0.05 * np.exp(-((h - 9.0) ** 2) / 8.0)
        + 0.17 * np.exp(-((h - 19.0) ** 2) / 6.0)
        - 0.01 * np.exp(-((h - 3.0) ** 2) / 8.0)
    )
    return TimeSeriesProfile(ts, pv, np.maximum(wt, 0.0), load, price)
