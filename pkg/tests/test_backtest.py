import numpy as np
import pytest

from flowcast.backtest import (
    BacktestConfig,
    BacktestReport,
    PortfolioState,
    Position,
    SubBasketResult,
    TradeRecord,
    mark_to_market,
    render_report,
    report_to_csv,
    run_backtest,
    trades_to_csv,
    valuations_to_csv,
)
from flowcast.errors import ConfigError, DataError


class MomentumPredictor:
    """Causal fake: predicts the last observed log-return, repeated k times."""

    def __init__(self, k=5):
        self.k = k
        self.prev = None
        self.last_ret = 0.0

    def update(self, close):
        if self.prev is not None:
            self.last_ret = np.log(close / self.prev)
        self.prev = close
        return np.full(self.k, self.last_ret)


class OraclePredictor:
    """Test-only clairvoyant: emits the true future returns of its series."""

    def __init__(self, closes, k=5):
        self.closes = np.asarray(closes, dtype=float)
        self.k = k
        self.i = -1

    def update(self, close):
        self.i += 1
        ahead = self.closes[self.i + 1 : self.i + 1 + self.k]
        future = np.log(ahead / self.closes[self.i : self.i + len(ahead)])
        out = np.zeros(self.k)
        out[: len(future)] = future
        return out


def random_universe(seed, n_symbols, length, vol=0.01):
    rng = np.random.default_rng(seed)
    return {
        f"S{i:02d}": 100.0 * np.exp(np.cumsum(rng.normal(0, vol, length)))
        for i in range(n_symbols)
    }


def small_cfg(days=15, basket_size=4, score_window=5):
    return BacktestConfig(
        initial_capital_per_subbasket=1000.0,
        days=days,
        basket_size=basket_size,
        subbasket_split=((1, basket_size // 2), (basket_size // 2 + 1, basket_size)),
        score_window=score_window,
    )


def open_positions_by_day(row):
    """Reconstruct {day: {symbol: (direction, qty, entry_price)}} from the trade log."""
    positions = {}
    timeline = {}
    for day in range(1, row.days + 1):
        for t in row.trades:
            if t.day != day:
                continue
            if t.action == "close":
                positions.pop(t.symbol, None)
            else:
                positions[t.symbol] = (t.direction, t.quantity, t.price)
        timeline[day] = dict(positions)
    return timeline


class TestMarkToMarket:
    def test_no_positions(self):
        assert mark_to_market(PortfolioState(cash=123.45), {}) == 123.45

    def test_long_position(self):
        state = PortfolioState(cash=0.0, positions={"A": Position("A", "long", 10, 100.0, 1)})
        assert mark_to_market(state, {"A": 110.0}) == pytest.approx(1100.0)

    def test_short_position(self):
        state = PortfolioState(cash=1000.0, positions={"A": Position("A", "short", 10, 100.0, 1)})
        assert mark_to_market(state, {"A": 90.0}) == pytest.approx(1100.0)

    def test_missing_price(self):
        state = PortfolioState(cash=0.0, positions={"A": Position("A", "long", 1, 100.0, 1)})
        with pytest.raises(DataError):
            mark_to_market(state, {"B": 5.0})


class TestRunBacktest:
    def test_constant_prices_roi_exactly_zero(self):
        cfg = small_cfg()
        length = cfg.warmup_days + cfg.days
        universe = {f"S{i:02d}": np.full(length, 100.0) for i in range(6)}
        report = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        for row in report.rows:
            assert row.final_valuation == row.initial_capital
            assert row.roi_pct == 0.0
        assert "0.00%" in render_report(report)

    def test_single_symbol_ten_percent(self):
        cfg = BacktestConfig(
            initial_capital_per_subbasket=1000.0,
            days=10,
            basket_size=1,
            subbasket_split=((1, 1),),
            score_window=5,
        )
        length = cfg.warmup_days + cfg.days
        closes = np.full(length, 100.0)
        # rise to 110 after the entry day
        entry_index = cfg.warmup_days  # day-1 close
        closes[entry_index + 1 :] = np.linspace(101, 110, cfg.days - 1)
        universe = {"ONLY": closes}
        report = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        row = report.rows[0]
        assert row.final_valuation == pytest.approx(1100.0)
        assert row.roi_pct == pytest.approx(10.0)
        assert "10.00%" in render_report(report)

    def test_accounting_conservation(self):
        cfg = small_cfg()
        universe = random_universe(7, 8, cfg.warmup_days + cfg.days)
        report = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        closes = {s: np.asarray(c) for s, c in universe.items()}
        for row in report.rows:
            timeline = open_positions_by_day(row)
            for day in range(2, row.days + 1):
                i_prev = cfg.warmup_days + day - 2
                i_now = cfg.warmup_days + day - 1
                pnl = 0.0
                for sym, (direction, qty, _entry) in timeline[day - 1].items():
                    move = closes[sym][i_now] - closes[sym][i_prev]
                    pnl += qty * move * (1 if direction == "long" else -1)
                change = row.valuations[day - 1] - row.valuations[day - 2]
                assert change == pytest.approx(pnl, abs=1e-9)

    def test_no_lookahead(self):
        cfg = small_cfg()
        length = cfg.warmup_days + cfg.days
        universe = random_universe(11, 8, length)
        report_a = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        cut_day = 9
        cut_index = cfg.warmup_days + cut_day  # first index after day cut_day
        rng = np.random.default_rng(99)
        tampered = {
            sym: np.r_[c[:cut_index], c[cut_index] * np.exp(np.cumsum(rng.normal(0, 0.05, length - cut_index)))]
            for sym, c in universe.items()
        }
        report_b = run_backtest(tampered, lambda s: MomentumPredictor(), cfg)
        assert report_a.selections[:cut_day] == report_b.selections[:cut_day]
        for ra, rb in zip(report_a.rows, report_b.rows):
            assert np.array_equal(ra.valuations[:cut_day], rb.valuations[:cut_day])
            ta = [t for t in ra.trades if t.day <= cut_day]
            tb = [t for t in rb.trades if t.day <= cut_day]
            assert ta == tb

    def test_deterministic(self):
        cfg = small_cfg()
        universe = random_universe(13, 8, cfg.warmup_days + cfg.days)
        a = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        b = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        for ra, rb in zip(a.rows, b.rows):
            assert np.array_equal(ra.valuations, rb.valuations)
            assert ra.trades == rb.trades

    def test_oracle_predictor_profits(self):
        cfg = small_cfg(days=20)
        length = cfg.warmup_days + cfg.days
        t = np.arange(length)
        universe = {}
        for i in range(8):
            trend = 0.004 * (1 if i % 2 == 0 else -1)
            universe[f"S{i:02d}"] = 100.0 * np.exp(trend * t)
        report = run_backtest(universe, lambda s: OraclePredictor(universe[s]), cfg)
        total_roi = (report.daily_totals[-1] / sum(r.initial_capital for r in report.rows) - 1) * 100
        assert total_roi > 0

    def test_universe_too_short(self):
        cfg = small_cfg()
        universe = random_universe(1, 6, cfg.warmup_days + cfg.days - 1)
        with pytest.raises(DataError):
            run_backtest(universe, lambda s: MomentumPredictor(), cfg)

    def test_universe_smaller_than_basket(self):
        cfg = small_cfg()
        universe = random_universe(1, 2, cfg.warmup_days + cfg.days)
        with pytest.raises(ConfigError):
            run_backtest(universe, lambda s: MomentumPredictor(), cfg)

    def test_positions_persist_while_selected(self):
        cfg = BacktestConfig(
            days=10, basket_size=2, subbasket_split=((1, 2),), score_window=5
        )
        length = cfg.warmup_days + cfg.days
        universe = {"AAA": np.full(length, 100.0), "BBB": np.full(length, 50.0)}
        report = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        row = report.rows[0]
        opens = [t for t in row.trades if t.action == "open"]
        closes_ = [t for t in row.trades if t.action == "close"]
        assert len(opens) == 2 and closes_ == []  # whole universe stays selected


from oracles import GOLDEN_TABLE, fixture_report


class TestRendering:
    def test_report_table_golden(self):
        assert render_report(fixture_report()) == GOLDEN_TABLE

    def test_zero_movement_renders_zero_roi(self):
        row = SubBasketResult("1-10", (1, 10), 5, 1000.0, 1000.0, 0.0, 1, 1000.0, 0.0,
                              np.full(5, 1000.0), [])
        text = render_report(BacktestReport([row], []))
        assert "0.00%" in text

    def test_csv_round_trip_exact(self):
        cfg = small_cfg()
        universe = random_universe(17, 8, cfg.warmup_days + cfg.days)
        report = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        text = report_to_csv(report)
        lines = text.strip().split("\n")
        assert lines[0].split(",")[0] == "Position in portfolio"
        for line, row in zip(lines[1:], report.rows):
            cells = line.split(",")
            assert cells[0] == row.label
            assert int(cells[1]) == row.days
            assert float(cells[2]) == row.initial_capital
            assert float(cells[3]) == row.final_valuation
            assert float(cells[4]) == row.roi_pct
            assert int(cells[5]) == row.peak_day
            assert float(cells[6]) == row.peak_valuation
            assert float(cells[7]) == row.peak_roi_pct

    def test_trades_and_valuations_csv(self):
        cfg = small_cfg()
        universe = random_universe(19, 8, cfg.warmup_days + cfg.days)
        report = run_backtest(universe, lambda s: MomentumPredictor(), cfg)
        trades = trades_to_csv(report).strip().split("\n")
        assert trades[0] == "day,symbol,action,direction,qty,price"
        assert len(trades) > 1
        vals = valuations_to_csv(report).strip().split("\n")
        assert vals[0] == "day,1-2,3-4,total"
        assert len(vals) == 1 + cfg.days
        first = vals[1].split(",")
        assert float(first[1]) + float(first[2]) == pytest.approx(float(first[3]))


class TestConfig:
    def test_split_must_cover_basket(self):
        with pytest.raises(ConfigError):
            BacktestConfig(basket_size=20, subbasket_split=((1, 10), (12, 20)))
        with pytest.raises(ConfigError):
            BacktestConfig(basket_size=20, subbasket_split=((1, 10),))

    def test_default_matches_published_shape(self):
        cfg = BacktestConfig()
        assert cfg.days == 41
        assert cfg.basket_size == 20
        assert cfg.initial_capital_per_subbasket == 1000.0
        assert cfg.subbasket_split == ((1, 10), (11, 20))
