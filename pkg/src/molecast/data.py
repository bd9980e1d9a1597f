"""Dataset ingestion, splitting, scaling, calendar marks, and windowing.

A dataset is a regularly spaced multichannel series.  The pipeline is:
load (or synthesize) a RawDataset, cut it into train/val/test views,
fit a per-channel scaler on the train range, then iterate sliding
windows that pair an input span with the prediction span that follows
it.  Every window also carries the calendar embedding of its first
input timestamp, which is what the mixing network conditions on.
"""

import csv
import math
import os
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import ConfigError, DataError
from .rng import Xoshiro256, derive_stream

_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# Seconds-per-step table; the first delta of a file must match one of these.
_GRANULARITY_STEPS = {600.0: "10min", 900.0: "15min", 3600.0: "hourly"}

_SPLIT_RATIOS = {"ett": (0.6, 0.2), "other": (0.7, 0.1)}


@dataclass
class RawDataset:
    """A loaded series: c channels sampled at L regularly spaced times."""

    name: str
    timestamps: list
    values: np.ndarray  # c x L, float64
    granularity: str
    channel_names: list

    @property
    def num_channels(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]


@dataclass
class SplitView:
    """A half-open target range [begin, end) into a RawDataset.

    lookback_extension says how far an input window may reach before
    begin: 0 for train (inputs stay inside the range), s for val/test
    (the first windows draw input from the tail of the prior split,
    but targets never cross the boundary).
    """

    role: str
    begin: int
    end: int
    lookback_extension: int

    @property
    def length(self):
        return self.end - self.begin


@dataclass
class WindowSample:
    """One supervised example: input span, its first-timestamp marks, target span."""

    x: np.ndarray  # c x s
    x_mark_first: np.ndarray  # t-vector in [-0.5, 0.5]
    y: np.ndarray  # c x p


def load_csv(path):
    """Read a `date,<ch1>,<ch2>,...` file into a RawDataset.

    Dates must be `YYYY-MM-DD HH:MM:SS` and regularly spaced at one of
    the supported steps (10 min, 15 min, 1 hour), inferred from the
    first delta.  Any malformed or non-finite cell is rejected with its
    file line and column name.
    """
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}")
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty")
        if len(header) < 2 or header[0] != "date":
            raise DataError(
                f"{path}: header must be 'date,<ch1>,...', got {header!r}"
            )
        channel_names = header[1:]

        timestamps = []
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path} line {line}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            try:
                stamp = datetime.strptime(row[0], _DATE_FORMAT)
            except ValueError:
                raise DataError(
                    f"{path} line {line}: cannot parse date {row[0]!r} "
                    f"(expected YYYY-MM-DD HH:MM:SS)"
                )
            parsed = []
            for name, cell in zip(channel_names, row[1:]):
                try:
                    value = float(cell)
                except ValueError:
                    value = math.nan
                if not math.isfinite(value):
                    raise DataError(
                        f"{path} line {line}, column {name!r}: "
                        f"cannot parse {cell!r} as a finite number"
                    )
                parsed.append(value)
            timestamps.append(stamp)
            rows.append(parsed)

    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows, got {len(rows)}")

    first_delta = (timestamps[1] - timestamps[0]).total_seconds()
    granularity = _GRANULARITY_STEPS.get(first_delta)
    if granularity is None:
        raise DataError(
            f"{path}: unsupported step of {first_delta} s between lines 2 "
            f"and 3; supported steps are 600, 900, and 3600 s"
        )
    for i in range(1, len(timestamps)):
        delta = (timestamps[i] - timestamps[i - 1]).total_seconds()
        if delta != first_delta:
            raise DataError(
                f"{path} line {i + 2}: irregular spacing, expected "
                f"{first_delta} s since the previous row, got {delta} s"
            )

    values = np.ascontiguousarray(np.array(rows, dtype=np.float64).T)
    name = os.path.splitext(os.path.basename(path))[0]
    return RawDataset(
        name=name,
        timestamps=timestamps,
        values=values,
        granularity=granularity,
        channel_names=channel_names,
    )


def save_csv(raw, path):
    """Write a RawDataset back out in the same `date,...` format."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["date"] + list(raw.channel_names))
        for j, stamp in enumerate(raw.timestamps):
            row = [stamp.strftime(_DATE_FORMAT)]
            row.extend(repr(v) for v in raw.values[:, j])
            writer.writerow(row)


def split_dataset(raw, family, s):
    """Cut a dataset into chronological train/val/test views.

    family 'ett' uses 6:2:2 proportions, 'other' uses 7:1:2; boundaries
    are floored and the remainder goes to test.  s is the input length;
    val and test carry it as their lookback extension so their first
    windows are well defined.
    """
    if family not in _SPLIT_RATIOS:
        raise ConfigError(
            f"unknown dataset family {family!r}; expected 'ett' or 'other'"
        )
    if s < 1:
        raise ConfigError(f"input length must be >= 1, got {s}")
    train_frac, val_frac = _SPLIT_RATIOS[family]
    total = raw.length
    n_train = int(math.floor(train_frac * total))
    n_val = int(math.floor(val_frac * total))
    n_test = total - n_train - n_val
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise DataError(
            f"dataset of length {total} is too short to split "
            f"{n_train}/{n_val}/{n_test}"
        )
    train = SplitView("train", 0, n_train, 0)
    val = SplitView("val", n_train, n_train + n_val, s)
    test = SplitView("test", n_train + n_val, total, s)
    return train, val, test


@dataclass
class ChannelScaler:
    """Per-channel standardization fitted on the train target range only."""

    mean: np.ndarray  # c x 1
    std: np.ndarray  # c x 1, floored at 1e-8

    @classmethod
    def fit(cls, raw, train_view):
        if train_view.length < 1:
            raise DataError("cannot fit a scaler on an empty train range")
        block = raw.values[:, train_view.begin:train_view.end]
        mean = block.mean(axis=1, keepdims=True)
        # Population (biased) standard deviation, floored so constant
        # channels stay finite under division.
        std = np.sqrt(((block - mean) ** 2).mean(axis=1, keepdims=True))
        std = np.maximum(std, 1e-8)
        return cls(mean=mean, std=std)

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean


def mark_features(stamp, granularity):
    """Embed a datetime as t features, each in [-0.5, 0.5].

    Hourly data gets [hour, weekday, day-of-month, day-of-year], each
    scaled by its range; sub-hourly data prepends a minute feature.
    Monday maps to -0.5 and Sunday to +0.5 on the weekday axis.
    """
    if granularity not in ("10min", "15min", "hourly"):
        raise ConfigError(f"unknown granularity {granularity!r}")
    day_of_year = stamp.timetuple().tm_yday
    features = [
        stamp.hour / 23 - 0.5,
        stamp.weekday() / 6 - 0.5,
        (stamp.day - 1) / 30 - 0.5,
        # Denominator stays 365 in leap years; day 366 would land a hair
        # above +0.5, so clamp.
        min((day_of_year - 1) / 365 - 0.5, 0.5),
    ]
    if granularity != "hourly":
        features.insert(0, stamp.minute / 59 - 0.5)
    return np.array(features, dtype=np.float64)


class WindowSet:
    """Lazy chronological sequence of WindowSamples over one split view.

    Sample k pairs input columns [g-s, g) with target columns [g, g+p),
    where g walks every admissible target start.  Targets stay inside
    the view's range; inputs may reach back lookback_extension columns
    before it.
    """

    def __init__(self, raw, view, s, p):
        if s < 1 or p < 1:
            raise ConfigError(f"window sizes must be >= 1, got s={s}, p={p}")
        lead = max(0, s - view.lookback_extension)
        count = view.length - p + 1 - lead
        if count < 1:
            raise DataError(
                f"{view.role} range of length {view.length} hosts no "
                f"window with s={s}, p={p}, "
                f"lookback_extension={view.lookback_extension}"
            )
        first_target = view.begin + lead
        if first_target - s < 0:
            raise DataError(
                f"{view.role} range beginning at {view.begin} cannot "
                f"extend {view.lookback_extension} steps back for s={s}"
            )
        if view.end > raw.length:
            raise DataError(
                f"{view.role} range [{view.begin}, {view.end}) exceeds "
                f"dataset length {raw.length}"
            )
        self._raw = raw
        self._s = s
        self._p = p
        self._first_target = first_target
        self._count = count

    def __len__(self):
        return self._count

    def __getitem__(self, k):
        if not 0 <= k < self._count:
            raise IndexError(f"window index {k} out of range [0, {self._count})")
        g = self._first_target + k
        raw = self._raw
        x = np.ascontiguousarray(raw.values[:, g - self._s:g])
        y = np.ascontiguousarray(raw.values[:, g:g + self._p])
        mark = mark_features(raw.timestamps[g - self._s], raw.granularity)
        return WindowSample(x=x, x_mark_first=mark, y=y)

    def __iter__(self):
        for k in range(self._count):
            yield self[k]


def toy_generate(num_hours, sigma, seed):
    """Synthesize the single-channel hourly series with a weekday regime.

    The calendar starts Monday 2018-01-01 00:00.  Monday through
    Thursday the value is 6*sin(2*pi*t/24)+20 plus N(0, sigma^2) noise;
    Friday through Sunday the sine period halves to 12 hours.  Both
    branches share the global hour index t, so with sigma=0 the series
    repeats exactly every 168 hours.
    """
    if num_hours < 1:
        raise ConfigError(f"num_hours must be >= 1, got {num_hours}")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    rng = Xoshiro256(derive_stream(seed, "toy-noise"))
    start = datetime(2018, 1, 1, 0, 0, 0)
    timestamps = [start + timedelta(hours=t) for t in range(num_hours)]
    values = np.empty((1, num_hours), dtype=np.float64)
    for t in range(num_hours):
        period = 24 if timestamps[t].weekday() < 4 else 12
        # Reduce the phase before scaling by 2*pi so equal phases give
        # bitwise-equal values across weeks.
        angle = 2.0 * math.pi * ((t % period) / period)
        values[0, t] = 6.0 * math.sin(angle) + 20.0 + rng.gaussian(0.0, sigma)
    return RawDataset(
        name="toy",
        timestamps=timestamps,
        values=values,
        granularity="hourly",
        channel_names=["value"],
    )
