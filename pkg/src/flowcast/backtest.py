"""Imitation long/short basket backtest with daily reselection.

Per day: every symbol's online predictor sees the day's close, the universe is
scored by Pearson correlation between its recent next-day predictions and the
realized returns, the top basket is selected, and rank-range sub-baskets are
rebalanced: positions persist while the symbol stays in the sub-basket's rank
range and close when it drops out. Fills at daily closes with zero costs;
results are gross.

Accounting convention: a long position is carried at qty * price and its entry
debits cash; a short is carried at entry-referenced P&L qty * (entry - price)
with no cash movement until exit. Total valuation is identical to the
notional-reserving formulation.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .market_data import Series
from .selection import BasketSpec, score_universe, select_basket

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Position:
    symbol: str
    direction: str  # long | short
    quantity: float
    entry_price: float
    entry_day: int

    def __post_init__(self):
        if self.quantity <= 0:
            raise ConfigError("position quantity must be > 0")
        if self.direction not in ("long", "short"):
            raise ConfigError(f"unknown direction {self.direction!r}")

    def market_value(self, price: float) -> float:
        if self.direction == "long":
            return self.quantity * price
        return self.quantity * (self.entry_price - price)


@dataclass
class PortfolioState:
    cash: float
    positions: dict[str, Position] = field(default_factory=dict)
    day: int = 0


def mark_to_market(state: PortfolioState, closes: dict[str, float]) -> float:
    """Valuation = cash + sum of position marks; pure query."""
    total = state.cash
    for sym, pos in state.positions.items():
        if sym not in closes:
            raise DataError(f"no close price for open position {sym}")
        price = closes[sym]
        if not np.isfinite(price):
            raise DataError(f"non-finite close for {sym}")
        total += pos.market_value(price)
    return total


@dataclass(frozen=True)
class BacktestConfig:
    initial_capital_per_subbasket: float = 1000.0
    days: int = 41
    basket_size: int = 20
    subbasket_split: tuple[tuple[int, int], ...] = ((1, 10), (11, 20))
    score_window: int = 10  # warm-up days of (prediction, realized) pairs before trading

    def __post_init__(self):
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        if self.score_window < 3:
            raise ConfigError("score_window must be >= 3")
        covered = [r for lo, hi in self.subbasket_split for r in range(lo, hi + 1)]
        if covered != list(range(1, self.basket_size + 1)):
            raise ConfigError("subbasket_split must cover ranks 1..basket_size exactly")

    @property
    def warmup_days(self) -> int:
        return self.score_window + 1


@dataclass(frozen=True)
class TradeRecord:
    day: int
    symbol: str
    action: str  # open | close
    direction: str
    quantity: float
    price: float


@dataclass
class SubBasketResult:
    label: str
    rank_range: tuple[int, int]
    days: int
    initial_capital: float
    final_valuation: float
    roi_pct: float
    peak_day: int
    peak_valuation: float
    peak_roi_pct: float
    valuations: np.ndarray  # one entry per trading day
    trades: list[TradeRecord]


@dataclass
class BacktestReport:
    rows: list[SubBasketResult]
    selections: list[list[str]]  # per day, basket symbols in rank order

    @property
    def daily_totals(self) -> np.ndarray:
        return np.sum([row.valuations for row in self.rows], axis=0)


class _SubBasket:
    def __init__(self, label: str, rank_range: tuple[int, int], capital: float):
        self.label = label
        self.rank_range = rank_range
        self.slots = rank_range[1] - rank_range[0] + 1
        self.allocation = capital / self.slots
        self.state = PortfolioState(cash=capital)
        self.valuations: list[float] = []
        self.trades: list[TradeRecord] = []

    def rebalance(self, day: int, members: list[str], directions: dict[str, int], closes: dict[str, float]):
        for sym in sorted(set(self.state.positions) - set(members)):
            pos = self.state.positions.pop(sym)
            price = closes[sym]
            self.state.cash += pos.market_value(price)
            self.trades.append(TradeRecord(day, sym, "close", pos.direction, pos.quantity, price))
        for sym in members:
            if sym in self.state.positions:
                continue  # holding period is open-ended while selected
            price = closes[sym]
            direction = "short" if directions.get(sym, 1) < 0 else "long"
            qty = self.allocation / price
            if direction == "long":
                self.state.cash -= qty * price
            pos = Position(sym, direction, qty, price, day)
            self.state.positions[sym] = pos
            self.trades.append(TradeRecord(day, sym, "open", direction, qty, price))

    def mark(self, day: int, closes: dict[str, float]) -> float:
        self.state.day = day
        value = mark_to_market(self.state, closes)
        self.valuations.append(value)
        return value


def _extract_closes(universe) -> dict[str, np.ndarray]:
    closes = {}
    for sym, data in universe.items():
        arr = data.close if isinstance(data, Series) else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise DataError(f"universe series {sym} has non-finite or non-positive closes")
        closes[sym] = arr
    return closes


def run_backtest(universe, predictor_factory, cfg: BacktestConfig, selector=select_basket) -> BacktestReport:
    """Walk the configured test days over the universe.

    ``universe`` maps symbol -> Series or close array covering warm-up plus the
    test days. ``predictor_factory(symbol)`` must return an object whose
    ``update(close) -> array`` emits the k-vector of predicted log-returns
    after absorbing each close, never seeing future data.
    """
    closes = _extract_closes(universe)
    symbols = sorted(closes)
    if len(symbols) < cfg.basket_size:
        raise ConfigError(f"universe of {len(symbols)} cannot fill a basket of {cfg.basket_size}")
    need = cfg.warmup_days + cfg.days
    for sym in symbols:
        if len(closes[sym]) < need:
            raise DataError(f"{sym}: {len(closes[sym])} closes < required {need}")

    predictors = {sym: predictor_factory(sym) for sym in symbols}
    pred_traces: dict[str, list[float]] = {sym: [] for sym in symbols}
    actual_traces: dict[str, list[float]] = {sym: [] for sym in symbols}
    latest_prediction: dict[str, np.ndarray] = {}

    def absorb(index: int):
        for sym in symbols:
            price = closes[sym][index]
            if index > 0:
                actual_traces[sym].append(float(np.log(price / closes[sym][index - 1])))
            values = np.asarray(predictors[sym].update(float(price)), dtype=np.float64)
            latest_prediction[sym] = values
            pred_traces[sym].append(float(values[0]))

    for i in range(cfg.warmup_days):
        absorb(i)

    baskets = [
        _SubBasket(f"{lo}-{hi}", (lo, hi), cfg.initial_capital_per_subbasket)
        for lo, hi in cfg.subbasket_split
    ]
    spec = BasketSpec(tuple(symbols), cfg.basket_size)
    selections: list[list[str]] = []

    for day in range(1, cfg.days + 1):
        index = cfg.warmup_days + day - 1
        absorb(index)
        # complete (prediction, realized) pairs end one bar back
        traces = {
            sym: (np.array(pred_traces[sym][:-1]), np.array(actual_traces[sym]))
            for sym in symbols
        }
        scores, skipped = score_universe(traces, cfg.score_window)
        if skipped:
            raise DataError(f"symbols missing scores on day {day}: {skipped}")
        ranked = selector(scores, spec)
        ordered = [s.symbol for s in ranked]
        selections.append(ordered)

        day_closes = {sym: float(closes[sym][index]) for sym in symbols}
        directions = {sym: 1 if float(np.sum(latest_prediction[sym])) >= 0 else -1 for sym in ordered}
        for basket in baskets:
            lo, hi = basket.rank_range
            members = ordered[lo - 1 : hi]
            basket.rebalance(day, members, directions, day_closes)
            basket.mark(day, day_closes)

    rows = []
    for basket in baskets:
        vals = np.array(basket.valuations)
        peak_idx = int(np.argmax(vals))
        initial = cfg.initial_capital_per_subbasket
        rows.append(
            SubBasketResult(
                label=basket.label,
                rank_range=basket.rank_range,
                days=cfg.days,
                initial_capital=initial,
                final_valuation=float(vals[-1]),
                roi_pct=(float(vals[-1]) / initial - 1.0) * 100.0,
                peak_day=peak_idx + 1,
                peak_valuation=float(vals[peak_idx]),
                peak_roi_pct=(float(vals[peak_idx]) / initial - 1.0) * 100.0,
                valuations=vals,
                trades=basket.trades,
            )
        )
    return BacktestReport(rows, selections)


REPORT_COLUMNS = (
    "Position in portfolio",
    "No. of days in test",
    "Initial capital",
    "Valuation at end",
    "ROI",
    "Peak Day",
    "Valuation at Peak",
    "Peak ROI",
)


def _report_cells(row: SubBasketResult) -> tuple[str, ...]:
    return (
        row.label,
        str(row.days),
        f"{row.initial_capital:.2f}",
        f"{row.final_valuation:.2f}",
        f"{row.roi_pct:.2f}%",
        str(row.peak_day),
        f"{row.peak_valuation:.2f}",
        f"{row.peak_roi_pct:.2f}%",
    )


def render_report(report: BacktestReport) -> str:
    """Fixed-width text table in the standard result layout."""
    table = [REPORT_COLUMNS] + [_report_cells(r) for r in report.rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for row in table:
        lines.append(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_to_csv(report: BacktestReport) -> str:
    """Full-precision CSV of the report rows (parses back exactly)."""
    out = io.StringIO()
    out.write(",".join(REPORT_COLUMNS) + "\n")
    for r in report.rows:
        out.write(
            f"{r.label},{r.days},{r.initial_capital!r},{r.final_valuation!r},"
            f"{r.roi_pct!r},{r.peak_day},{r.peak_valuation!r},{r.peak_roi_pct!r}\n"
        )
    return out.getvalue()


def valuations_to_csv(report: BacktestReport) -> str:
    out = io.StringIO()
    labels = [r.label for r in report.rows]
    out.write("day," + ",".join(labels) + ",total\n")
    totals = report.daily_totals
    for d in range(len(totals)):
        cells = [str(d + 1)] + [repr(float(r.valuations[d])) for r in report.rows]
        cells.append(repr(float(totals[d])))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def trades_to_csv(report: BacktestReport) -> str:
    out = io.StringIO()
    out.write("day,symbol,action,direction,qty,price\n")
    records = [t for r in report.rows for t in r.trades]
    records.sort(key=lambda t: (t.day, t.symbol, t.action))
    for t in records:
        out.write(f"{t.day},{t.symbol},{t.action},{t.direction},{t.quantity!r},{t.price!r}\n")
    return out.getvalue()
