"""Classical technical indicators in fixed and cycle-adaptive form.

All line outputs are aligned to the input series: warm-up prefixes are NaN and
their length is a deterministic function of the periods. Indicators can also be
evaluated on a price path extended by predicted log-returns; kinds that need
true highs/lows or volume on the forward segment refuse instead of fabricating
them.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .ctrnn import Prediction
from .cycle import CycleEstimate
from .errors import ConfigError
from .market_data import Series, format_timestamp


class Kind(Enum):
    SMA = "sma"
    EMA = "ema"
    MACD = "macd"
    RSI = "rsi"
    STOCHASTIC_KD = "stochastic_kd"
    CCI = "cci"
    ATR = "atr"
    BOLLINGER = "bollinger"
    KELTNER = "keltner"
    OBV = "obv"
    MFI = "mfi"
    SUPPORT_RESISTANCE = "support_resistance"
    FIBONACCI_LEVELS = "fibonacci_levels"


DEFAULT_PERIODS: dict[Kind, tuple[int, ...]] = {
    Kind.SMA: (20,),
    Kind.EMA: (20,),
    Kind.MACD: (12, 26, 9),
    Kind.RSI: (14,),
    Kind.STOCHASTIC_KD: (14, 3),
    Kind.CCI: (20,),
    Kind.ATR: (14,),
    Kind.BOLLINGER: (20,),
    Kind.KELTNER: (20, 14),
    Kind.OBV: (),
    Kind.MFI: (14,),
    Kind.SUPPORT_RESISTANCE: (5,),
    Kind.FIBONACCI_LEVELS: (50,),
}

FIB_RATIOS = (0.236, 0.382, 0.5, 0.618, 0.786)

# kinds that need true OHLC or volume and cannot run on a close-only forward path
OHLC_ONLY_KINDS = frozenset({Kind.ATR, Kind.KELTNER, Kind.MFI})


@dataclass(frozen=True)
class IndicatorSpec:
    kind: Kind
    periods: tuple[int, ...]
    width: float = 2.0

    def __post_init__(self):
        if any(p < 1 for p in self.periods):
            raise ConfigError(f"{self.kind.value}: all periods must be >= 1")
        if self.kind is Kind.MACD and not self.periods[0] < self.periods[1]:
            raise ConfigError("MACD fast period must be < slow period")

    @classmethod
    def default(cls, kind: Kind) -> "IndicatorSpec":
        return cls(kind, DEFAULT_PERIODS[kind])


@dataclass(frozen=True)
class AdaptiveRule:
    """Maps a cycle length P to indicator periods, clamped to [lo, hi].

    MACD gets (P/2, P, P/4); the stochastic lookback is P/2 with smoothing
    max(3, P/10); single-window kinds get P/2.
    """

    lo: int = 2
    hi: int = 200

    def _clamp(self, value: float) -> int:
        return int(min(self.hi, max(self.lo, round(value))))

    def periods_for(self, kind: Kind, cycle_period: float) -> tuple[int, ...] | None:
        p = cycle_period
        if kind is Kind.MACD:
            fast, slow, signal = self._clamp(p / 2), self._clamp(p), self._clamp(p / 4)
            if fast >= slow:
                fast = max(self.lo, slow - 1)
            if fast >= slow:  # entire range collapsed onto the lower clamp
                slow = fast + 1
            return (fast, slow, signal)
        if kind is Kind.RSI:
            return (self._clamp(p / 2),)
        if kind is Kind.STOCHASTIC_KD:
            return (self._clamp(p / 2), max(3, self._clamp(p / 10)))
        if kind in (Kind.BOLLINGER, Kind.ATR, Kind.CCI, Kind.SMA, Kind.EMA):
            return (self._clamp(p / 2),)
        if kind is Kind.KELTNER:
            half = self._clamp(p / 2)
            return (half, half)
        return None  # kind has no adaptive mapping


@dataclass(frozen=True)
class IndicatorOutput:
    """Named lines aligned to the input bars; NaN marks the warm-up prefix.

    ``predicted_from`` is the first index of a synthetic forward segment when
    the indicator was computed on a prediction-extended path.
    """

    kind: Kind
    lines: dict[str, np.ndarray]
    predicted_from: int | None = None

    def line(self, name: str) -> np.ndarray:
        return self.lines[name]

    def warmup(self, name: str) -> int:
        arr = self.lines[name]
        finite = np.flatnonzero(np.isfinite(arr))
        return int(finite[0]) if len(finite) else len(arr)


@dataclass(frozen=True)
class Level:
    kind: str  # support | resistance | fibonacci
    price: float
    index: int | None = None  # bar index for extrema
    ratio: float | None = None  # retracement fraction for fibonacci


def _sma(values: np.ndarray, period: int) -> np.ndarray:
    out = np.full(len(values), np.nan)
    if period <= len(values):
        kernel = np.ones(period) / period
        out[period - 1 :] = np.convolve(values, kernel, mode="valid")
    return out


def _ema(values: np.ndarray, period: int) -> np.ndarray:
    """EMA with alpha = 2/(period+1), seeded with the SMA of the first period values."""
    n = len(values)
    out = np.full(n, np.nan)
    if period > n:
        return out
    out[period - 1] = values[:period].mean()
    alpha = 2.0 / (period + 1)
    for t in range(period, n):
        out[t] = alpha * values[t] + (1 - alpha) * out[t - 1]
    return out


def _wilder(values: np.ndarray, period: int) -> np.ndarray:
    """Wilder smoothing seeded with the mean of the first period values."""
    n = len(values)
    out = np.full(n, np.nan)
    if period > n:
        return out
    out[period - 1] = values[:period].mean()
    for t in range(period, n):
        out[t] = (out[t - 1] * (period - 1) + values[t]) / period
    return out


def moving_average(series: Series, kind: Kind, period: int) -> IndicatorOutput:
    if kind not in (Kind.SMA, Kind.EMA):
        raise ConfigError(f"moving_average supports SMA and EMA, not {kind.value}")
    fn = _sma if kind is Kind.SMA else _ema
    return IndicatorOutput(kind, {kind.value: fn(series.close, period)})


def macd(series: Series, fast: int, slow: int, signal: int) -> IndicatorOutput:
    if not fast < slow:
        raise ConfigError("MACD fast period must be < slow period")
    n = len(series)
    fast_line = _ema(series.close, fast)
    slow_line = _ema(series.close, slow)
    macd_line = fast_line - slow_line
    signal_line = np.full(n, np.nan)
    start = slow - 1
    if start + signal <= n:
        signal_line[start:] = _ema(macd_line[start:], signal)
    histogram = macd_line - signal_line
    return IndicatorOutput(Kind.MACD, {"macd": macd_line, "signal": signal_line, "histogram": histogram})


def rsi(series: Series, period: int) -> IndicatorOutput:
    n = len(series)
    out = np.full(n, np.nan)
    if period + 1 <= n:
        delta = np.diff(series.close)
        gains = np.where(delta > 0, delta, 0.0)
        losses = np.where(delta < 0, -delta, 0.0)
        avg_gain = _wilder(gains, period)
        avg_loss = _wilder(losses, period)
        for t in range(period - 1, n - 1):
            g, l = avg_gain[t], avg_loss[t]
            if g == 0.0 and l == 0.0:
                out[t + 1] = 50.0  # flat market carries no directional information
            elif l == 0.0:
                out[t + 1] = 100.0
            else:
                out[t + 1] = 100.0 - 100.0 / (1.0 + g / l)
    return IndicatorOutput(Kind.RSI, {"rsi": out})


def stochastic_kd(series: Series, lookback: int, smooth: int) -> IndicatorOutput:
    n = len(series)
    k = np.full(n, np.nan)
    if lookback <= n:
        highs = np.lib.stride_tricks.sliding_window_view(series.high, lookback).max(axis=1)
        lows = np.lib.stride_tricks.sliding_window_view(series.low, lookback).min(axis=1)
        closes = series.close[lookback - 1 :]
        span = highs - lows
        raw = np.where(span > 0, 100.0 * (closes - lows) / np.where(span > 0, span, 1.0), 50.0)
        k[lookback - 1 :] = raw
    d = np.full(n, np.nan)
    if lookback - 1 + smooth <= n:
        d[lookback - 1 :] = _sma(k[lookback - 1 :], smooth)
    return IndicatorOutput(Kind.STOCHASTIC_KD, {"k": k, "d": d})


def _true_range(series: Series) -> np.ndarray:
    tr = np.empty(len(series))
    tr[0] = series.high[0] - series.low[0]
    if len(series) > 1:
        prev_close = series.close[:-1]
        tr[1:] = np.maximum.reduce(
            [
                series.high[1:] - series.low[1:],
                np.abs(series.high[1:] - prev_close),
                np.abs(series.low[1:] - prev_close),
            ]
        )
    return tr


def volatility_channel(series: Series, kind: Kind, periods: tuple[int, ...], width: float = 2.0) -> IndicatorOutput:
    if kind is Kind.ATR:
        return IndicatorOutput(kind, {"atr": _wilder(_true_range(series), periods[0])})
    if kind is Kind.BOLLINGER:
        period = periods[0]
        mid = _sma(series.close, period)
        std = np.full(len(series), np.nan)
        if period <= len(series):
            win = np.lib.stride_tricks.sliding_window_view(series.close, period)
            std[period - 1 :] = win.std(axis=1)  # population std
        return IndicatorOutput(kind, {"upper": mid + width * std, "mid": mid, "lower": mid - width * std})
    if kind is Kind.KELTNER:
        ema_period = periods[0]
        atr_period = periods[1] if len(periods) > 1 else periods[0]
        mid = _ema(series.close, ema_period)
        atr = _wilder(_true_range(series), atr_period)
        return IndicatorOutput(kind, {"upper": mid + width * atr, "mid": mid, "lower": mid - width * atr})
    raise ConfigError(f"volatility_channel supports ATR, Bollinger, Keltner, not {kind.value}")


def volume_indicator(series: Series, kind: Kind, period: int = 14) -> IndicatorOutput:
    n = len(series)
    if kind is Kind.OBV:
        signs = np.r_[1.0, np.sign(np.diff(series.close))]  # first bar counts as accumulation
        return IndicatorOutput(kind, {"obv": np.cumsum(signs * series.volume)})
    if kind is Kind.MFI:
        out = np.full(n, np.nan)
        typical = (series.high + series.low + series.close) / 3.0
        flow = typical * series.volume
        if period + 1 <= n:
            dtp = np.diff(typical)
            pos = np.where(dtp > 0, flow[1:], 0.0)
            neg = np.where(dtp < 0, flow[1:], 0.0)
            win_pos = np.lib.stride_tricks.sliding_window_view(pos, period).sum(axis=1)
            win_neg = np.lib.stride_tricks.sliding_window_view(neg, period).sum(axis=1)
            vals = np.empty(len(win_pos))
            both_zero = (win_pos == 0) & (win_neg == 0)
            no_neg = (win_neg == 0) & ~both_zero
            rest = ~(both_zero | no_neg)
            vals[both_zero] = 50.0
            vals[no_neg] = 100.0
            vals[rest] = 100.0 - 100.0 / (1.0 + win_pos[rest] / win_neg[rest])
            out[period:] = vals
        return IndicatorOutput(kind, {"mfi": out})
    raise ConfigError(f"volume_indicator supports OBV and MFI, not {kind.value}")


def cci(series: Series, period: int) -> IndicatorOutput:
    """Commodity channel index: deviation of typical price from its SMA,
    scaled by 0.015 x mean absolute deviation."""
    n = len(series)
    out = np.full(n, np.nan)
    typical = (series.high + series.low + series.close) / 3.0
    if period <= n:
        win = np.lib.stride_tricks.sliding_window_view(typical, period)
        sma = win.mean(axis=1)
        mad = np.abs(win - sma[:, None]).mean(axis=1)
        current = typical[period - 1 :]
        vals = np.zeros(len(sma))
        nz = mad > 0
        vals[nz] = (current[nz] - sma[nz]) / (0.015 * mad[nz])
        out[period - 1 :] = vals
    return IndicatorOutput(Kind.CCI, {"cci": out})


def structure_levels(series: Series, kind: Kind, lookback: int) -> list[Level]:
    """Support/resistance extrema or Fibonacci retracements of the recent range."""
    if kind is Kind.SUPPORT_RESISTANCE:
        if lookback < 3:
            raise ConfigError("support/resistance lookback must be >= 3")
        m = lookback
        closes = series.close
        levels = []
        for i in range(m, len(closes) - m):
            window = closes[i - m : i + m + 1]
            center = closes[i]
            others = np.r_[window[:m], window[m + 1 :]]
            if np.all(center > others):
                levels.append(Level("resistance", float(center), index=i))
            elif np.all(center < others):
                levels.append(Level("support", float(center), index=i))
        return levels
    if kind is Kind.FIBONACCI_LEVELS:
        hi = float(series.high[-lookback:].max())
        lo = float(series.low[-lookback:].min())
        span = hi - lo
        return [Level("fibonacci", hi - r * span, ratio=r) for r in FIB_RATIOS]
    raise ConfigError(f"structure_levels supports SupportResistance and FibonacciLevels, not {kind.value}")


def adapt_periods(spec: IndicatorSpec, estimate: CycleEstimate, rule: AdaptiveRule) -> IndicatorSpec:
    """Re-derive the spec's periods from a cycle estimate; invalid estimates
    and kinds without a mapping pass through unchanged."""
    if not estimate.valid:
        return spec
    periods = rule.periods_for(spec.kind, estimate.period)
    if periods is None:
        return spec
    return replace(spec, periods=periods)


def compute(series: Series, spec: IndicatorSpec) -> IndicatorOutput:
    """Evaluate any line-producing indicator from its spec."""
    kind, p = spec.kind, spec.periods
    if kind in (Kind.SMA, Kind.EMA):
        return moving_average(series, kind, p[0])
    if kind is Kind.MACD:
        return macd(series, p[0], p[1], p[2])
    if kind is Kind.RSI:
        return rsi(series, p[0])
    if kind is Kind.STOCHASTIC_KD:
        return stochastic_kd(series, p[0], p[1])
    if kind is Kind.CCI:
        return cci(series, p[0])
    if kind in (Kind.ATR, Kind.BOLLINGER, Kind.KELTNER):
        return volatility_channel(series, kind, p, spec.width)
    if kind is Kind.OBV:
        return volume_indicator(series, kind)
    if kind is Kind.MFI:
        return volume_indicator(series, kind, p[0])
    raise ConfigError(f"{kind.value} produces levels, not lines; use structure_levels")


def extend_with_prediction(actual: Series, pred: Prediction) -> Series:
    """Append a close-only forward path reconstructed from predicted log-returns.

    Synthetic bars carry high = low = open = close and zero volume.
    """
    if len(actual) == 0:
        raise ConfigError("cannot extend an empty series")
    last_close = actual.close[-1]
    forward = last_close * np.exp(np.cumsum(pred.values))
    step = actual.timeframe.seconds
    last_ts = actual.timestamps[-1]
    ts = np.r_[actual.timestamps, last_ts + step * np.arange(1, pred.horizon + 1)]
    return Series(
        actual.symbol,
        actual.timeframe,
        ts,
        np.r_[actual.open, forward],
        np.r_[actual.high, forward],
        np.r_[actual.low, forward],
        np.r_[actual.close, forward],
        np.r_[actual.volume, np.zeros(pred.horizon)],
    )


def compute_on_prediction(actual: Series, pred: Prediction, spec: IndicatorSpec) -> IndicatorOutput:
    """Indicator over the actual path joined with the predicted forward path.

    The forward segment is tagged via ``predicted_from``; OHLC/volume kinds
    are rejected because highs, lows, and volume cannot be fabricated.
    """
    if spec.kind in OHLC_ONLY_KINDS:
        raise ConfigError(
            f"{spec.kind.value} needs true high/low/volume bars; the predicted segment is close-only"
        )
    joined = extend_with_prediction(actual, pred)
    out = compute(joined, spec)
    return replace(out, predicted_from=len(actual))


def indicator_csv(output: IndicatorOutput, timestamps: np.ndarray) -> str:
    """Timestamp column plus one column per line; forward rows get predicted=1."""
    names = list(output.lines)
    n = len(next(iter(output.lines.values())))
    cut = output.predicted_from if output.predicted_from is not None else n
    out = io.StringIO()
    out.write("timestamp," + ",".join(names) + ",predicted\n")
    for i in range(n):
        cells = [format_timestamp(int(timestamps[i]))]
        for name in names:
            v = output.lines[name][i]
            cells.append("" if not np.isfinite(v) else repr(float(v)))
        cells.append("1" if i >= cut else "0")
        out.write(",".join(cells) + "\n")
    return out.getvalue()
