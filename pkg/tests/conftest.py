import numpy as np

from flowcast.market_data import Series, Timeframe, parse_timestamp

BASE_TS = parse_timestamp("2024-01-02T08:00:00Z")


def build_series(
    closes,
    symbol="TEST",
    timeframe=Timeframe.M1,
    volumes=None,
    opens=None,
    highs=None,
    lows=None,
    t0=BASE_TS,
):
    """OHLCV series with plausible open/high/low derived from closes unless given."""
    closes = np.asarray(closes, dtype=float)
    n = len(closes)
    volumes = np.full(n, 100.0) if volumes is None else np.asarray(volumes, dtype=float)
    opens = np.r_[closes[0], closes[:-1]] if opens is None else np.asarray(opens, dtype=float)
    highs = np.maximum(opens, closes) if highs is None else np.asarray(highs, dtype=float)
    lows = np.minimum(opens, closes) if lows is None else np.asarray(lows, dtype=float)
    ts = t0 + np.arange(n, dtype=np.int64) * timeframe.seconds
    return Series(symbol, timeframe, ts, opens, highs, lows, closes, volumes)


def random_ohlcv(seed, n, symbol="RND", timeframe=Timeframe.M1, drift=0.0, vol=0.01):
    """Random-walk OHLCV with highs/lows straddling open/close."""
    rng = np.random.default_rng(seed)
    closes = 100.0 * np.exp(np.cumsum(rng.normal(drift, vol, n)))
    opens = np.r_[closes[0], closes[:-1]]
    body_hi = np.maximum(opens, closes)
    body_lo = np.minimum(opens, closes)
    highs = body_hi * (1 + np.abs(rng.normal(0, vol / 2, n)))
    lows = body_lo * (1 - np.abs(rng.normal(0, vol / 2, n)))
    volumes = rng.integers(100, 10000, n).astype(float)
    ts = BASE_TS + np.arange(n, dtype=np.int64) * timeframe.seconds
    return Series(symbol, timeframe, ts, opens, highs, lows, closes, volumes)
