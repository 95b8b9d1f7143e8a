"""Static chart rendering: price/prediction with adaptive indicator panes.

Figures are written as SVG with a fixed hash salt and no date metadata, so an
identical bundle always renders to identical bytes (required for worker-count
invariance checks and golden files).
"""

from __future__ import annotations

import matplotlib
import numpy as np
from matplotlib.figure import Figure

SVG_RC = {"svg.hashsalt": "flowcast", "svg.fonttype": "path"}


def render_chart_bundle(bundle, path) -> None:
    """Four panes: price + forward prediction, MACD, cycle power, stochastic."""
    n = len(bundle.actual)
    x_actual = np.arange(-n + 1, 1)
    x_pred = np.arange(1, len(bundle.predicted_prices) + 1)

    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(8, 9), dpi=100)
        axes = fig.subplots(4, 1, sharex=True)
        fig.suptitle(f"{bundle.symbol}  (r = {bundle.pearson_r:.4f})")

        ax = axes[0]
        ax.plot(x_actual, bundle.actual, color="tab:blue", lw=1.2, label="actual")
        if len(x_pred):
            joined_x = np.r_[0, x_pred]
            joined_y = np.r_[bundle.actual[-1], bundle.predicted_prices]
            ax.plot(joined_x, joined_y, color="tab:red", lw=1.2, label="predicted")
        ax.axvline(0, color="0.8", lw=0.8)
        ax.set_ylabel("price")
        ax.legend(loc="upper left", fontsize=8)

        ax = axes[1]
        macd_n = len(bundle.macd["macd"])
        x_macd = np.arange(-macd_n + 1, 1)
        ax.plot(x_macd, bundle.macd["macd"], color="tab:blue", lw=1.0, label="macd")
        ax.plot(x_macd, bundle.macd["signal"], color="tab:orange", lw=1.0, label="signal")
        ax.bar(x_macd, np.nan_to_num(bundle.macd["histogram"]), color="0.6", width=0.8)
        ax.axhline(0, color="0.8", lw=0.8)
        ax.set_ylabel("MACD")
        ax.legend(loc="upper left", fontsize=8)

        ax = axes[2]
        wav_n = len(bundle.wavelet_power)
        ax.plot(np.arange(-wav_n + 1, 1), bundle.wavelet_power, color="tab:green", lw=1.0)
        ax.set_ylabel("wavelet growth")

        ax = axes[3]
        st_n = len(bundle.stochastic["k"])
        x_st = np.arange(-st_n + 1, 1)
        ax.plot(x_st, bundle.stochastic["k"], color="tab:blue", lw=1.0, label="%K")
        ax.plot(x_st, bundle.stochastic["d"], color="tab:orange", lw=1.0, label="%D")
        ax.set_ylim(-5, 105)
        ax.axhline(80, color="0.85", lw=0.8)
        ax.axhline(20, color="0.85", lw=0.8)
        ax.set_ylabel("stochastic")
        ax.set_xlabel("bars relative to now")
        ax.legend(loc="upper left", fontsize=8)

        fig.savefig(path, format="svg", metadata={"Date": None})


def render_equity_curve(report, path) -> None:
    """Daily valuation traces per sub-basket plus the total."""
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(8, 4.5), dpi=100)
        ax = fig.subplots(1, 1)
        days = np.arange(1, len(report.daily_totals) + 1)
        for row in report.rows:
            ax.plot(days, row.valuations, lw=1.1, label=f"ranks {row.label}")
        ax.plot(days, report.daily_totals, lw=1.4, color="black", label="total")
        ax.set_xlabel("trading day")
        ax.set_ylabel("valuation")
        ax.legend(loc="best", fontsize=8)
        fig.savefig(path, format="svg", metadata={"Date": None})
