"""Continuous per-symbol pipeline: clean, learn online, predict, adapt
indicators, and emit chart bundles; plus the deterministic worker pool used to
fan work out across symbols.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import charts
from .ctrnn import OnlineTrainer, Prediction, Topology, TrainConfig
from .cycle import DEFAULT_FALLBACK_PERIOD, CycleEstimate, WaveletConfig, estimate_cycle
from .errors import ConfigError
from .indicators import AdaptiveRule, IndicatorSpec, Kind, adapt_periods, compute
from .market_data import Bar, CleaningPolicy, RollingNormalizer, Series, Timeframe, format_timestamp
from .selection import pearson_flagged

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunnerConfig:
    """Everything the CLI and stream loop need; JSON config files mirror the
    field names and CLI flags override file values."""

    mode: str = "batch"  # batch | stream
    timeframe: str = "5m"
    horizon: int = 10
    universe: str = ""
    basket_size: int = 20
    seed: int = 0
    workers: int = 1
    out_dir: str = "out"
    # network
    n_hidden: int = 16
    truncation_depth: int = 20
    base_rate: float = 0.005
    adapt_decay: float = 0.99
    dt: float = 0.5
    tau: float = 1.0
    # features and correlation windows (one 5m UK session is 102 bars)
    norm_window: int = 32
    corr_window: int = 102
    # charting
    chart_window: int = 64
    plot_horizon: int = 8
    # cycle estimation cadence
    cycle_every: int = 10
    cycle_window: int = 256
    cycle_min_period: float = 8.0
    cycle_max_period: float = 64.0
    # cleaning
    outlier_window: int = 16
    outlier_threshold: float = 8.0
    gap_policy: str = "carry_forward"
    # backtest
    days: int = 41
    score_window: int = 10

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.plot_horizon > self.horizon:
            raise ConfigError("plot_horizon cannot exceed horizon")

    @property
    def warmup_bars(self) -> int:
        """Bars consumed before the first emission (feature warm-up)."""
        return self.norm_window

    def train_config(self, symbol: str) -> TrainConfig:
        return TrainConfig(
            truncation_depth=self.truncation_depth,
            base_rate=self.base_rate,
            adapt_decay=self.adapt_decay,
            seed=symbol_seed(self.seed, symbol),
        )

    def topology(self, n_in: int = 3) -> Topology:
        return Topology(n_in=n_in, n_hidden=self.n_hidden, n_out=self.horizon, dt=self.dt, tau=self.tau)

    def wavelet_config(self) -> WaveletConfig:
        return WaveletConfig(
            min_period=self.cycle_min_period,
            max_period=self.cycle_max_period,
            window=self.cycle_window,
        )

    def cleaning_policy(self) -> CleaningPolicy:
        return CleaningPolicy(
            outlier_window=self.outlier_window,
            outlier_threshold=self.outlier_threshold,
            gap_policy=self.gap_policy,
        )


def symbol_seed(base: int, symbol: str) -> int:
    """Stable per-symbol RNG seed (crc32 keeps it reproducible across runs)."""
    return (int(base) ^ zlib.crc32(symbol.encode("utf-8"))) & 0x7FFFFFFF


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        values = json.load(fh)
    known = {f.name for f in fields(RunnerConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return values


def make_config(file_values: dict | None = None, **overrides) -> RunnerConfig:
    merged = dict(file_values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunnerConfig(**merged)


@dataclass(frozen=True)
class ChartBundle:
    """Everything one combination chart needs, copied out of pipeline state."""

    symbol: str
    timestamps: np.ndarray
    actual: np.ndarray
    predicted_prices: np.ndarray
    predicted_timestamps: np.ndarray
    pearson_r: float
    pred_trace: np.ndarray
    actual_trace: np.ndarray
    macd: dict[str, np.ndarray]
    stochastic: dict[str, np.ndarray]
    wavelet_power: np.ndarray


@dataclass
class StreamResult:
    symbol: str
    emissions: list[tuple[Prediction, ChartBundle]]
    audit: list[str]

    @property
    def final_bundle(self) -> ChartBundle | None:
        return self.emissions[-1][1] if self.emissions else None


class StreamingCleaner:
    """One-bar-lag spike filter matching the batch outlier rule: a bar is held
    until its successor shows whether the move reverted."""

    def __init__(self, policy: CleaningPolicy):
        self.policy = policy
        self.pending: Bar | None = None
        self.prev_kept: float | None = None
        self.returns: deque[float] = deque(maxlen=policy.outlier_window)
        self.dropped: list[Bar] = []

    def _decide(self, bar: Bar, successor: Bar | None) -> Bar | None:
        if self.prev_kept is None:
            self.prev_kept = bar.close
            return bar
        r = math.log(bar.close / self.prev_kept)
        if len(self.returns) == self.returns.maxlen and successor is not None:
            hist = np.fromiter(self.returns, dtype=np.float64)
            mad = float(np.median(np.abs(hist - np.median(hist))))
            if abs(r) > self.policy.outlier_threshold * mad:
                revert = abs(math.log(successor.close / self.prev_kept))
                if revert <= mad:
                    self.dropped.append(bar)
                    return None
        self.returns.append(r)
        self.prev_kept = bar.close
        return bar

    def push(self, bar: Bar) -> list[Bar]:
        if self.pending is None:
            self.pending = bar
            return []
        decided = self._decide(self.pending, bar)
        self.pending = bar
        return [decided] if decided is not None else []

    def flush(self) -> list[Bar]:
        if self.pending is None:
            return []
        decided = self._decide(self.pending, None)
        self.pending = None
        return [decided] if decided is not None else []


class SymbolPipeline:
    """Incremental feed-to-chart-bundle pipeline for one symbol."""

    def __init__(self, symbol: str, cfg: RunnerConfig):
        self.symbol = symbol
        self.cfg = cfg
        self.timeframe = Timeframe.parse(cfg.timeframe)
        self.cleaner = StreamingCleaner(cfg.cleaning_policy())
        self.normalizer = RollingNormalizer(cfg.norm_window)
        self.trainer = OnlineTrainer(cfg.topology(), cfg.train_config(symbol))
        self.rule = AdaptiveRule()
        self.cycle_period = DEFAULT_FALLBACK_PERIOD
        self.cycle_power = 0.0
        self.audit: list[str] = []
        self._closes: list[float] = []
        self._highs: list[float] = []
        self._lows: list[float] = []
        self._opens: list[float] = []
        self._volumes: list[float] = []
        self._timestamps: list[int] = []
        self._wavelet: list[float] = []
        self._pred_pairs: deque[tuple[float, float]] = deque(maxlen=cfg.corr_window)
        self._last_pred1: float | None = None
        self._last_ts: int | None = None
        self.emissions: list[tuple[Prediction, ChartBundle]] = []

    def push(self, bar: Bar) -> list[tuple[Prediction, ChartBundle]]:
        self._check_gap(bar)
        out = []
        for decided in self.cleaner.push(bar):
            emitted = self._process(decided)
            if emitted is not None:
                out.append(emitted)
        return out

    def finish(self) -> list[tuple[Prediction, ChartBundle]]:
        out = []
        for decided in self.cleaner.flush():
            emitted = self._process(decided)
            if emitted is not None:
                out.append(emitted)
        return out

    def _check_gap(self, bar: Bar) -> None:
        if self._last_ts is not None:
            gap = bar.timestamp - self._last_ts
            if gap > self.timeframe.seconds:
                note = f"feed gap of {gap}s before {format_timestamp(bar.timestamp)}"
                self.audit.append(note)
                logger.info("%s: %s", self.symbol, note)
                if self.cfg.gap_policy == "split_sessions":
                    self.normalizer.reset()  # pause emissions until features re-warm
        self._last_ts = bar.timestamp

    def _process(self, bar: Bar):
        self._timestamps.append(bar.timestamp)
        self._opens.append(bar.open)
        self._highs.append(bar.high)
        self._lows.append(bar.low)
        self._closes.append(bar.close)
        self._volumes.append(bar.volume)

        features = self.normalizer.update(bar)
        self._maybe_estimate_cycle()
        self._wavelet.append(self.cycle_power)
        if features is None:
            return None

        realized = math.log(self._closes[-1] / self._closes[-2])
        if self._last_pred1 is not None:
            self._pred_pairs.append((self._last_pred1, realized))
        pred = self.trainer.observe(features, realized, timestamp=bar.timestamp)
        self._last_pred1 = float(pred.values[0])

        bundle = self._build_bundle(pred)
        emission = (pred, bundle)
        self.emissions.append(emission)
        return emission

    def _maybe_estimate_cycle(self) -> None:
        n = len(self._closes)
        if n < self.cfg.cycle_window or n % self.cfg.cycle_every != 0:
            return
        window = np.log(np.asarray(self._closes[-self.cfg.cycle_window :]))
        est = estimate_cycle(window, self.cfg.wavelet_config())
        self.cycle_power = est.power
        if est.valid:
            self.cycle_period = est.period

    def _adapted(self, kind: Kind) -> IndicatorSpec:
        est = CycleEstimate(self.cycle_period, self.cycle_power, True)
        return adapt_periods(IndicatorSpec.default(kind), est, self.rule)

    def _history_series(self, tail: int) -> Series:
        n = len(self._closes)
        lo = max(0, n - tail)
        return Series(
            self.symbol,
            self.timeframe,
            np.asarray(self._timestamps[lo:], dtype=np.int64),
            np.asarray(self._opens[lo:]),
            np.asarray(self._highs[lo:]),
            np.asarray(self._lows[lo:]),
            np.asarray(self._closes[lo:]),
            np.asarray(self._volumes[lo:]),
        )

    def _build_bundle(self, pred: Prediction) -> ChartBundle:
        cfg = self.cfg
        macd_spec = self._adapted(Kind.MACD)
        stoch_spec = self._adapted(Kind.STOCHASTIC_KD)
        # enough tail for indicator warm-up to converge inside the charted span
        tail = cfg.chart_window + 8 * max(macd_spec.periods[1], stoch_spec.periods[0])
        series = self._history_series(tail)
        macd_out = compute(series, macd_spec)
        stoch_out = compute(series, stoch_spec)

        w = min(cfg.chart_window, len(series))
        sl = slice(len(series) - w, len(series))
        closes = series.close[sl]
        ts = series.timestamps[sl]

        if self._pred_pairs and len(self._pred_pairs) >= 3:
            pairs = np.array(self._pred_pairs)
            r, _ = pearson_flagged(pairs[:, 0], pairs[:, 1])
            pred_trace, actual_trace = pairs[:, 0].copy(), pairs[:, 1].copy()
        else:
            r = 0.0
            pred_trace = np.array([])
            actual_trace = np.array([])

        horizon = cfg.plot_horizon
        forward = closes[-1] * np.exp(np.cumsum(pred.values[:horizon]))
        forward_ts = ts[-1] + self.timeframe.seconds * np.arange(1, horizon + 1)

        wavelet = np.asarray(self._wavelet[-w:])
        return ChartBundle(
            symbol=self.symbol,
            timestamps=ts.copy(),
            actual=closes.copy(),
            predicted_prices=forward,
            predicted_timestamps=forward_ts,
            pearson_r=float(r),
            pred_trace=pred_trace,
            actual_trace=actual_trace,
            macd={k: v[sl].copy() for k, v in macd_out.lines.items()},
            stochastic={k: v[sl].copy() for k, v in stoch_out.lines.items()},
            wavelet_power=wavelet,
        )


def run_symbol_stream(symbol: str, series: Series, cfg: RunnerConfig) -> StreamResult:
    pipeline = SymbolPipeline(symbol, cfg)
    for i in range(len(series)):
        pipeline.push(series.bar(i))
    pipeline.finish()
    return StreamResult(symbol, pipeline.emissions, pipeline.audit)


def run_stream(cfg: RunnerConfig, feeds: dict[str, Series]) -> dict[str, StreamResult]:
    """Per-symbol pipelines over the feeds; deterministic for any worker count."""
    symbols = sorted(feeds)
    return parallel_map(symbols, lambda s: run_symbol_stream(s, feeds[s], cfg), cfg.workers)


def parallel_map(symbols, task, workers: int) -> dict:
    """Apply ``task`` per symbol; the merge is keyed and ordered by the input
    list so results are identical to sequential execution for any worker count.
    A failing task fails the whole call, naming the symbol."""
    symbols = list(symbols)
    if workers < 1:
        raise ConfigError("worker count must be >= 1")
    if workers == 1 or len(symbols) <= 1:
        out = {}
        for s in symbols:
            try:
                out[s] = task(s)
            except Exception as exc:
                raise RuntimeError(f"worker task failed for symbol {s!r}: {exc}") from exc
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [(s, pool.submit(task, s)) for s in symbols]
        out = {}
        for s, fut in futures:
            try:
                out[s] = fut.result()
            except Exception as exc:
                raise RuntimeError(f"worker task failed for symbol {s!r}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# exports


def chart_csv(bundle: ChartBundle) -> str:
    """All chart traces with a predicted flag; pearson_r rides in a metadata row."""
    lines = [f"pearson_r,{bundle.pearson_r!r}"]
    header = ["timestamp", "close", "macd", "signal", "histogram", "k", "d", "wavelet_power", "predicted"]
    lines.append(",".join(header))

    def fmt(v) -> str:
        return "" if not np.isfinite(v) else repr(float(v))

    for i in range(len(bundle.actual)):
        lines.append(
            ",".join(
                [
                    format_timestamp(int(bundle.timestamps[i])),
                    fmt(bundle.actual[i]),
                    fmt(bundle.macd["macd"][i]),
                    fmt(bundle.macd["signal"][i]),
                    fmt(bundle.macd["histogram"][i]),
                    fmt(bundle.stochastic["k"][i]),
                    fmt(bundle.stochastic["d"][i]),
                    fmt(bundle.wavelet_power[i]),
                    "0",
                ]
            )
        )
    for j in range(len(bundle.predicted_prices)):
        lines.append(
            ",".join(
                [
                    format_timestamp(int(bundle.predicted_timestamps[j])),
                    repr(float(bundle.predicted_prices[j])),
                    "", "", "", "", "", "",
                    "1",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def export_chart(bundle: ChartBundle, out_dir) -> list[Path]:
    """Write the bundle as CSV plus an SVG figure; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{bundle.symbol}_chart.csv"
    csv_path.write_text(chart_csv(bundle), encoding="utf-8")
    svg_path = out / f"{bundle.symbol}_chart.svg"
    charts.render_chart_bundle(bundle, svg_path)
    return [csv_path, svg_path]


def predictions_csv(result: StreamResult) -> str:
    k = len(result.emissions[0][0].values) if result.emissions else 0
    lines = ["origin_timestamp," + ",".join(f"v{j+1}" for j in range(k))]
    for pred, _ in result.emissions:
        cells = [format_timestamp(pred.origin_timestamp)] + [repr(float(v)) for v in pred.values]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def export_stream_results(results: dict[str, StreamResult], out_dir) -> list[Path]:
    """Per symbol: the prediction log and the final chart bundle (CSV + SVG)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for symbol in sorted(results):
        result = results[symbol]
        pred_path = out / f"{symbol}_predictions.csv"
        pred_path.write_text(predictions_csv(result), encoding="utf-8")
        paths.append(pred_path)
        bundle = result.final_bundle
        if bundle is not None:
            paths.extend(export_chart(bundle, out))
        if result.audit:
            audit_path = out / f"{symbol}_audit.txt"
            audit_path.write_text("\n".join(result.audit) + "\n", encoding="utf-8")
            paths.append(audit_path)
    return paths


# ---------------------------------------------------------------------------
# online predictor adapter for the backtest


class CtrnnPredictor:
    """Backtest adapter: one online network fed raw per-bar log-returns."""

    def __init__(self, symbol: str, cfg: RunnerConfig):
        self.trainer = OnlineTrainer(cfg.topology(n_in=1), cfg.train_config(symbol))
        self.prev: float | None = None

    def update(self, close: float) -> np.ndarray:
        r = 0.0 if self.prev is None else math.log(close / self.prev)
        self.prev = close
        pred = self.trainer.observe(np.array([r]), r)
        return pred.values


def ctrnn_predictor_factory(cfg: RunnerConfig):
    return lambda symbol: CtrnnPredictor(symbol, cfg)
