"""Command-line entry points.

Subcommands: ingest, train, predict, backtest, stream, chart. A JSON config
file (--config) supplies defaults; explicit flags override it. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import charts
from .ctrnn import NetworkState, load_checkpoint, predict, save_checkpoint, step, train_online
from .errors import ConfigError, DataError, FlowcastError, NumericalError, ParseError, ValidationError
from .market_data import (
    SessionCalendar,
    Timeframe,
    format_timestamp,
    mark_session_gaps,
    normalize,
    parse_csv,
    remove_outliers,
    removed_to_csv,
    resample,
    series_to_csv,
)
from .runner import (
    RunnerConfig,
    ctrnn_predictor_factory,
    export_stream_results,
    load_config_file,
    make_config,
    parallel_map,
    run_stream,
    run_symbol_stream,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we reserve that for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowcast", description=__doc__)
    parser.add_argument("--config", help="JSON config file mirroring RunnerConfig fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, clean, and resample one CSV feed")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--timeframe", default=None, help="target timeframe, e.g. 5m")
    p.add_argument("--clean", action="store_true", help="apply the outlier policy")
    p.add_argument("--split-sessions", action="store_true", help="segment at session gaps")
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="train one network per universe symbol")
    p.add_argument("--universe", required=True, help="directory of per-symbol CSVs")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("predict", help="run a checkpoint over a feed without learning")
    p.add_argument("--symbol", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("backtest", help="imitation long/short basket backtest")
    p.add_argument("--universe", required=True)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--basket", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("stream", help="continuous pipeline over a universe of feeds")
    p.add_argument("--universe", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("chart", help="chart bundle for one symbol")
    p.add_argument("--symbol", required=True)
    p.add_argument("--in", dest="infile", default=None, help="CSV feed (default <universe>/<symbol>.csv)")
    p.add_argument("--universe", default=None)
    p.add_argument("--out", default=None)
    return parser


def _config_from_args(args) -> RunnerConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {
        "horizon": getattr(args, "horizon", None),
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "universe": getattr(args, "universe", None),
        "out_dir": getattr(args, "out", None),
        "days": getattr(args, "days", None),
        "basket_size": getattr(args, "basket", None),
        "timeframe": getattr(args, "timeframe", None),
    }
    return make_config(file_values, **overrides)


def _load_universe(path, timeframe: str) -> dict:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"universe directory {path!r} does not exist")
    feeds = {}
    for csv_path in sorted(root.glob("*.csv")):
        with open(csv_path, "rb") as fh:
            feeds[csv_path.stem] = parse_csv(fh, symbol=csv_path.stem, timeframe=Timeframe.parse(timeframe))
    if not feeds:
        raise DataError(f"no CSV feeds found in {path!r}")
    return feeds


def cmd_ingest(args, cfg: RunnerConfig) -> int:
    src = Path(args.infile)
    with open(src, "rb") as fh:
        series = parse_csv(fh, symbol=src.stem)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.clean:
        result = remove_outliers(series, cfg.cleaning_policy())
        series = result.series
        audit = out_dir / f"{src.stem}_removed.csv"
        audit.write_text(removed_to_csv(result), encoding="utf-8")
        print(f"removed {len(result.removed)} outlier bars -> {audit}")

    if args.split_sessions:
        segments = mark_session_gaps(series, SessionCalendar(), cfg.cleaning_policy())
        print(f"{len(segments)} session segments")

    target = Timeframe.parse(args.timeframe) if args.timeframe else series.timeframe
    if target != series.timeframe:
        series = resample(series, target)
    dest = out_dir / f"{src.stem}_{target.value}.csv"
    dest.write_text(series_to_csv(series), encoding="utf-8")
    print(f"wrote {len(series)} bars -> {dest}")
    return EXIT_OK


def _training_stream(series, window: int):
    feats = normalize(series, window)
    rets = np.diff(np.log(series.close))
    for i in range(feats.shape[0]):
        yield feats[i], rets[window - 1 + i]


def cmd_train(args, cfg: RunnerConfig) -> int:
    feeds = _load_universe(cfg.universe, cfg.timeframe)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def task(symbol):
        series = feeds[symbol]
        result = train_online(
            _training_stream(series, cfg.norm_window), cfg.topology(), cfg.train_config(symbol)
        )
        return result

    results = parallel_map(sorted(feeds), task, cfg.workers)
    summary = ["symbol,bars,updates,summed_sq_error"]
    for symbol, result in results.items():
        text = save_checkpoint(result.weights, cfg.topology(), cfg.train_config(symbol).seed, result.updates)
        (out_dir / f"{symbol}_weights.json").write_text(text, encoding="utf-8")
        summary.append(
            f"{symbol},{result.bars_seen},{result.updates},{result.error.summed_sq_error!r}"
        )
    (out_dir / "training_summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print(f"trained {len(results)} symbols -> {out_dir}")
    return EXIT_OK


def cmd_predict(args, cfg: RunnerConfig) -> int:
    weights, topo, _seed, _updates = load_checkpoint(Path(args.checkpoint).read_text(encoding="utf-8"))
    with open(args.infile, "rb") as fh:
        series = parse_csv(fh, symbol=args.symbol)
    feats = normalize(series, cfg.norm_window)
    if feats.shape[1] != topo.n_in:
        raise ConfigError(f"checkpoint expects {topo.n_in} features, feed yields {feats.shape[1]}")
    state = NetworkState.initial(topo)
    lines = ["origin_timestamp," + ",".join(f"v{j+1}" for j in range(topo.n_out))]
    for i in range(feats.shape[0]):
        state = step(state, weights, feats[i], topo)
        ts = int(series.timestamps[cfg.norm_window + i])
        pred = predict(state, weights, topo, origin_timestamp=ts)
        if not np.all(np.isfinite(pred.values)):
            raise NumericalError(f"non-finite prediction at {format_timestamp(ts)}")
        lines.append(format_timestamp(ts) + "," + ",".join(repr(float(v)) for v in pred.values))
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dest = out_dir / f"{args.symbol}_predictions.csv"
    dest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {feats.shape[0]} predictions -> {dest}")
    return EXIT_OK


def cmd_backtest(args, cfg: RunnerConfig) -> int:
    feeds = _load_universe(cfg.universe, cfg.timeframe)
    bt_cfg = bt.BacktestConfig(
        days=cfg.days,
        basket_size=cfg.basket_size,
        subbasket_split=_even_split(cfg.basket_size),
        score_window=cfg.score_window,
    )
    report = bt.run_backtest(feeds, ctrnn_predictor_factory(cfg), bt_cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(bt.render_report(report), encoding="utf-8")
    (out_dir / "report.csv").write_text(bt.report_to_csv(report), encoding="utf-8")
    (out_dir / "valuations.csv").write_text(bt.valuations_to_csv(report), encoding="utf-8")
    (out_dir / "trades.csv").write_text(bt.trades_to_csv(report), encoding="utf-8")
    charts.render_equity_curve(report, out_dir / "equity.svg")
    print(bt.render_report(report), end="")
    print(f"artifacts -> {out_dir}")
    return EXIT_OK


def _even_split(basket_size: int) -> tuple[tuple[int, int], ...]:
    half = basket_size // 2
    if half == 0:
        return ((1, basket_size),)
    if basket_size % 2:
        return ((1, half), (half + 1, basket_size))
    return ((1, half), (half + 1, basket_size))


def cmd_stream(args, cfg: RunnerConfig) -> int:
    feeds = _load_universe(cfg.universe, cfg.timeframe)
    results = run_stream(cfg, feeds)
    paths = export_stream_results(results, cfg.out_dir)
    emitted = sum(len(r.emissions) for r in results.values())
    print(f"{emitted} emissions across {len(results)} symbols; {len(paths)} files -> {cfg.out_dir}")
    return EXIT_OK


def cmd_chart(args, cfg: RunnerConfig) -> int:
    if args.infile:
        src = Path(args.infile)
    elif cfg.universe:
        src = Path(cfg.universe) / f"{args.symbol}.csv"
    else:
        raise ConfigError("chart needs --in or --universe")
    with open(src, "rb") as fh:
        series = parse_csv(fh, symbol=args.symbol, timeframe=Timeframe.parse(cfg.timeframe))
    result = run_symbol_stream(args.symbol, series, cfg)
    bundle = result.final_bundle
    if bundle is None:
        raise DataError(f"feed too short: no emissions after a {cfg.warmup_bars}-bar warm-up")
    from .runner import export_chart

    paths = export_chart(bundle, cfg.out_dir)
    print(f"chart for {args.symbol} (r = {bundle.pearson_r:.4f}) -> " + ", ".join(str(p) for p in paths))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "backtest": cmd_backtest,
    "stream": cmd_stream,
    "chart": cmd_chart,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        return COMMANDS[args.command](args, cfg)
    except (ParseError, ValidationError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FlowcastError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:  # worker-task failures carry their cause
        if isinstance(exc.__cause__, NumericalError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
