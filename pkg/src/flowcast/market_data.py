"""OHLCV ingestion, cleaning, session segmentation, resampling and feature extraction.

Everything here is a pure function of its inputs; series are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import dataclass
from datetime import datetime, time, timezone
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError, ParseError, ValidationError

logger = logging.getLogger(__name__)

CSV_HEADER = ("timestamp", "open", "high", "low", "close", "volume")


def parse_timestamp(text: str) -> int:
    """ISO-8601 UTC timestamp -> epoch seconds."""
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class Timeframe(Enum):
    M1 = "1m"
    M3 = "3m"
    M5 = "5m"
    M15 = "15m"
    D1 = "1d"

    @property
    def minutes(self) -> int:
        return _TIMEFRAME_MINUTES[self]

    @property
    def seconds(self) -> int:
        return self.minutes * 60

    @classmethod
    def parse(cls, text: str) -> "Timeframe":
        try:
            return cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ConfigError(f"unknown timeframe {text!r}; expected one of {valid}") from None


_TIMEFRAME_MINUTES = {
    Timeframe.M1: 1,
    Timeframe.M3: 3,
    Timeframe.M5: 5,
    Timeframe.M15: 15,
    Timeframe.D1: 1440,
}


@dataclass(frozen=True)
class Bar:
    """One OHLCV record. Timestamp is UTC epoch seconds."""

    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        if not (self.low <= self.open <= self.high and self.low <= self.close <= self.high):
            raise ValidationError(
                f"bar at {format_timestamp(self.timestamp)} violates low <= open/close <= high: "
                f"o={self.open} h={self.high} l={self.low} c={self.close}"
            )
        if self.volume < 0:
            raise ValidationError(f"bar at {format_timestamp(self.timestamp)} has negative volume")


@dataclass(frozen=True)
class Series:
    """Ordered per-symbol bar sequence, stored column-wise for vector math."""

    symbol: str
    timeframe: Timeframe
    timestamps: np.ndarray  # int64 epoch seconds, strictly increasing
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.int64))
        for name in ("open", "high", "low", "close", "volume"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.timestamps)
        for name in ("open", "high", "low", "close", "volume"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name} length != timestamp length")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValidationError(f"series {self.symbol}: timestamps not strictly increasing")
        bad = (self.low > self.open) | (self.low > self.close) | (self.open > self.high) | (self.close > self.high)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"series {self.symbol}: bar {i} at {format_timestamp(int(self.timestamps[i]))} "
                "violates low <= open/close <= high"
            )
        if np.any(self.volume < 0):
            raise ValidationError(f"series {self.symbol}: negative volume")

    def __len__(self) -> int:
        return len(self.timestamps)

    def bar(self, i: int) -> Bar:
        return Bar(
            int(self.timestamps[i]),
            float(self.open[i]),
            float(self.high[i]),
            float(self.low[i]),
            float(self.close[i]),
            float(self.volume[i]),
        )

    def bars(self) -> list[Bar]:
        return [self.bar(i) for i in range(len(self))]

    def slice(self, start: int, stop: int) -> "Series":
        return Series(
            self.symbol,
            self.timeframe,
            self.timestamps[start:stop],
            self.open[start:stop],
            self.high[start:stop],
            self.low[start:stop],
            self.close[start:stop],
            self.volume[start:stop],
        )

    @classmethod
    def from_bars(cls, symbol: str, timeframe: Timeframe, bars: list[Bar]) -> "Series":
        return cls(
            symbol,
            timeframe,
            np.array([b.timestamp for b in bars], dtype=np.int64),
            np.array([b.open for b in bars]),
            np.array([b.high for b in bars]),
            np.array([b.low for b in bars]),
            np.array([b.close for b in bars]),
            np.array([b.volume for b in bars]),
        )

    @classmethod
    def empty(cls, symbol: str, timeframe: Timeframe) -> "Series":
        z = np.array([], dtype=np.float64)
        return cls(symbol, timeframe, np.array([], dtype=np.int64), z, z, z, z, z)


@dataclass(frozen=True)
class CleaningPolicy:
    """Outlier and gap treatment knobs.

    A bar is dropped when its log-return against the previous kept close exceeds
    ``outlier_threshold`` rolling MADs and the next bar reverts to within one MAD
    of the pre-spike level (single-bar spike). Thresholds below 1 can re-flag
    the join return on a second pass and are not recommended.
    """

    outlier_window: int = 16
    outlier_threshold: float = 8.0
    gap_policy: str = "split_sessions"  # split_sessions | carry_forward | drop_overnight

    def __post_init__(self):
        if self.outlier_window < 8:
            raise ConfigError("outlier_window must be >= 8")
        if self.outlier_threshold <= 0:
            raise ConfigError("outlier_threshold must be > 0")
        if self.gap_policy not in ("split_sessions", "carry_forward", "drop_overnight"):
            raise ConfigError(f"unknown gap_policy {self.gap_policy!r}")


@dataclass(frozen=True)
class SessionCalendar:
    """Trading session bounds, interpreted in UTC."""

    session_open: time = time(8, 0)
    session_close: time = time(16, 30)
    trading_days: frozenset[int] = frozenset({0, 1, 2, 3, 4})  # Monday=0

    def __post_init__(self):
        if not self.session_open < self.session_close:
            raise ConfigError("session_open must precede session_close")

    def in_session(self, epoch: int) -> bool:
        dt = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if dt.weekday() not in self.trading_days:
            return False
        return self.session_open <= dt.time() < self.session_close


@dataclass(frozen=True)
class Segment:
    """A session-contiguous slice of a series.

    ``joins`` lists bar indices at which a new session starts (carry_forward only).
    """

    series: Series
    joins: tuple[int, ...] = ()


@dataclass(frozen=True)
class CleanResult:
    series: Series
    removed: list[Bar]
    reasons: list[str]
    short_input: bool = False


def parse_csv(raw, symbol: str = "", timeframe: Timeframe | None = None) -> Series:
    """Parse header-bearing OHLCV CSV into a validated Series.

    Accepts bytes, str, or a file-like object. Rows are normalized to ascending
    timestamp order; duplicate timestamps and invariant violations raise.
    When ``timeframe`` is omitted it is inferred from the smallest bar spacing.
    """
    if isinstance(raw, bytes):
        text = raw.decode("utf-8")
    elif isinstance(raw, str):
        text = raw
    else:
        data = raw.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input, expected header row", line=1) from None
    if tuple(h.strip().lower() for h in header) != CSV_HEADER:
        raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", line=1)

    bars: list[Bar] = []
    lines: list[int] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 6:
            raise ParseError(f"expected 6 fields, got {len(row)}", line=lineno)
        try:
            bar = Bar(
                parse_timestamp(row[0]),
                float(row[1]),
                float(row[2]),
                float(row[3]),
                float(row[4]),
                float(row[5]),
            )
        except (ValueError, OverflowError) as exc:
            raise ParseError(f"malformed row: {exc}", line=lineno) from None
        try:
            bar.validate()
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        bars.append(bar)
        lines.append(lineno)

    order = sorted(range(len(bars)), key=lambda i: bars[i].timestamp)
    bars = [bars[i] for i in order]
    for a, b in zip(bars, bars[1:]):
        if a.timestamp == b.timestamp:
            raise ValidationError(f"duplicate timestamp {format_timestamp(a.timestamp)}")

    if timeframe is None:
        timeframe = _infer_timeframe(bars)
    if not bars:
        return Series.empty(symbol, timeframe)
    return Series.from_bars(symbol, timeframe, bars)


def _infer_timeframe(bars: list[Bar]) -> Timeframe:
    if len(bars) < 2:
        raise ConfigError("cannot infer timeframe from fewer than two bars; pass it explicitly")
    spacing = min(b.timestamp - a.timestamp for a, b in zip(bars, bars[1:]))
    for tf in Timeframe:
        if tf.seconds == spacing:
            return tf
    raise ConfigError(f"bar spacing {spacing}s matches no supported timeframe")


def series_to_csv(series: Series) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for i in range(len(series)):
        writer.writerow(
            [
                format_timestamp(int(series.timestamps[i])),
                repr(float(series.open[i])),
                repr(float(series.high[i])),
                repr(float(series.low[i])),
                repr(float(series.close[i])),
                repr(float(series.volume[i])),
            ]
        )
    return out.getvalue()


def removed_to_csv(result: CleanResult) -> str:
    """Audit CSV of removed bars with a reason column."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER + ("reason",))
    for bar, reason in zip(result.removed, result.reasons):
        writer.writerow(
            [
                format_timestamp(bar.timestamp),
                repr(bar.open),
                repr(bar.high),
                repr(bar.low),
                repr(bar.close),
                repr(bar.volume),
                reason,
            ]
        )
    return out.getvalue()


def resample(series: Series, target: Timeframe) -> Series:
    """Aggregate to a coarser timeframe.

    Buckets are anchored at the first bar (the session open after segmentation):
    open = first open, high = max, low = min, close = last close, volume = sum.
    """
    if target.minutes % series.timeframe.minutes != 0:
        raise ConfigError(
            f"target {target.value} is not an integer multiple of source {series.timeframe.value}"
        )
    if len(series) == 0:
        raise DataError("cannot resample an empty series")
    if target == series.timeframe:
        return series

    step = target.seconds
    bucket = (series.timestamps - series.timestamps[0]) // step
    starts = np.flatnonzero(np.r_[True, bucket[1:] != bucket[:-1]])
    ends = np.r_[starts[1:], len(series)] - 1
    return Series(
        series.symbol,
        target,
        series.timestamps[0] + bucket[starts] * step,
        series.open[starts],
        np.maximum.reduceat(series.high, starts),
        np.minimum.reduceat(series.low, starts),
        series.close[ends],
        np.add.reduceat(series.volume, starts),
    )


def remove_outliers(series: Series, policy: CleaningPolicy) -> CleanResult:
    """Drop single-bar spikes that immediately revert.

    Flags bar i when |log(c_i / prev_kept_close)| exceeds threshold x rolling MAD
    of kept log-returns and the following bar is back within one MAD of the
    pre-spike level. Surviving bars are untouched; removed bars are returned
    for audit. Idempotent for thresholds >= 1.
    """
    n = len(series)
    if n < policy.outlier_window:
        logger.warning(
            "series %s shorter than outlier window (%d < %d); cleaning skipped",
            series.symbol, n, policy.outlier_window,
        )
        return CleanResult(series, [], [], short_input=True)

    closes = series.close
    kept = [0]
    removed: list[Bar] = []
    reasons: list[str] = []
    returns: deque[float] = deque(maxlen=policy.outlier_window)
    prev_close = closes[0]

    for i in range(1, n):
        r = math.log(closes[i] / prev_close)
        if len(returns) == policy.outlier_window:
            hist = np.fromiter(returns, dtype=np.float64)
            mad = float(np.median(np.abs(hist - np.median(hist))))
            if abs(r) > policy.outlier_threshold * mad and i + 1 < n:
                revert = abs(math.log(closes[i + 1] / prev_close))
                if revert <= mad:
                    removed.append(series.bar(i))
                    reasons.append(
                        f"single-bar spike: |logret| {abs(r):.6g} > {policy.outlier_threshold:g} x MAD {mad:.6g}"
                    )
                    continue
        kept.append(i)
        returns.append(r)
        prev_close = closes[i]

    if not removed:
        return CleanResult(series, [], [])
    idx = np.array(kept, dtype=np.intp)
    cleaned = Series(
        series.symbol,
        series.timeframe,
        series.timestamps[idx],
        series.open[idx],
        series.high[idx],
        series.low[idx],
        series.close[idx],
        series.volume[idx],
    )
    return CleanResult(cleaned, removed, reasons)


def _session_keys(series: Series, calendar: SessionCalendar) -> list[tuple]:
    """Per-bar grouping key: in-session bars keyed by date, gap runs by run start."""
    keys: list[tuple] = []
    gap_run = -1
    prev_in = True
    for i in range(len(series)):
        ts = int(series.timestamps[i])
        if calendar.in_session(ts):
            day = datetime.fromtimestamp(ts, tz=timezone.utc).date()
            keys.append(("s", day))
            prev_in = True
        else:
            if prev_in:
                gap_run += 1
            keys.append(("g", gap_run))
            prev_in = False
    return keys


def mark_session_gaps(series: Series, calendar: SessionCalendar, policy: CleaningPolicy) -> list[Segment]:
    """Split, join, or filter a series at session boundaries per the gap policy.

    split_sessions: one segment per session (out-of-session runs form their own
    segments, so segments partition the input). carry_forward: a single segment
    with a discontinuity marker at each session join. drop_overnight: bars
    outside [session_open, session_close) on trading days are removed.
    """
    if len(series) == 0:
        return []

    if policy.gap_policy == "drop_overnight":
        mask = np.fromiter(
            (calendar.in_session(int(t)) for t in series.timestamps), dtype=bool, count=len(series)
        )
        idx = np.flatnonzero(mask)
        filtered = Series(
            series.symbol,
            series.timeframe,
            series.timestamps[idx],
            series.open[idx],
            series.high[idx],
            series.low[idx],
            series.close[idx],
            series.volume[idx],
        )
        return [Segment(filtered)] if len(filtered) else []

    keys = _session_keys(series, calendar)
    boundaries = [i for i in range(1, len(keys)) if keys[i] != keys[i - 1]]

    if policy.gap_policy == "carry_forward":
        return [Segment(series, joins=tuple(boundaries))]

    # split_sessions
    starts = [0] + boundaries
    stops = boundaries + [len(series)]
    return [Segment(series.slice(a, b)) for a, b in zip(starts, stops)]


def normalize(series: Series, window: int) -> np.ndarray:
    """Per-bar feature vectors for the predictor.

    Columns: rolling z-scored log-return of close, rolling z-scored log-volume,
    and high-low range fraction. The first ``window`` bars are warm-up and emit
    nothing, so the output has ``len(series) - window`` rows (row j belongs to
    bar j + window). A zero rolling std maps the z-score to 0.
    """
    if window < 2:
        raise ConfigError("normalize window must be >= 2")
    n = len(series)
    if n <= window:
        raise ValidationError(f"series length {n} must exceed window {window}")
    if np.any(series.close <= 0):
        raise ValidationError("non-positive close; series must be cleaned upstream")

    rets = np.diff(np.log(series.close))  # rets[i] = log-return of bar i+1
    logvol = np.log1p(series.volume)

    def rolling_z(values: np.ndarray, offset: int) -> np.ndarray:
        # z-score of the last element of each length-`window` trailing slice
        win = np.lib.stride_tricks.sliding_window_view(values, window)[offset:]
        mean = win.mean(axis=1)
        std = win.std(axis=1)
        last = win[:, -1]
        out = np.zeros(len(win))
        nz = std > 0.0
        out[nz] = (last[nz] - mean[nz]) / std[nz]
        return out

    z_ret = rolling_z(rets, 0)  # rows for bars window .. n-1
    z_vol = rolling_z(logvol, 1)
    rng = (series.high[window:] - series.low[window:]) / series.close[window:]
    return np.column_stack([z_ret, z_vol, rng])


class RollingNormalizer:
    """Streaming twin of :func:`normalize`; emits the same features bar by bar."""

    def __init__(self, window: int):
        if window < 2:
            raise ConfigError("normalize window must be >= 2")
        self.window = window
        self._rets: deque[float] = deque(maxlen=window)
        self._logvol: deque[float] = deque(maxlen=window)
        self._prev_close: float | None = None

    def reset(self) -> None:
        self._rets.clear()
        self._logvol.clear()
        self._prev_close = None

    def update(self, bar: Bar) -> np.ndarray | None:
        """Feed one bar; returns the feature vector once warm-up is satisfied."""
        if bar.close <= 0:
            raise ValidationError("non-positive close; series must be cleaned upstream")
        if self._prev_close is None:
            self._prev_close = bar.close
            self._logvol.append(math.log1p(bar.volume))
            return None
        self._rets.append(math.log(bar.close / self._prev_close))
        self._logvol.append(math.log1p(bar.volume))
        self._prev_close = bar.close
        if len(self._rets) < self.window:
            return None

        def z(values: deque[float]) -> float:
            arr = np.fromiter(values, dtype=np.float64)
            std = arr.std()
            return float((arr[-1] - arr.mean()) / std) if std > 0.0 else 0.0

        rng = (bar.high - bar.low) / bar.close
        return np.array([z(self._rets), z(self._logvol), rng])
