"""Pearson scoring of predicted vs actual traces and top-N basket selection."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrelationScore:
    symbol: str
    r: float
    window: int
    degenerate: bool = False  # zero variance on either trace


@dataclass(frozen=True)
class BasketSpec:
    universe: tuple[str, ...]
    size: int = 20

    def __post_init__(self):
        if self.size > len(self.universe):
            raise ConfigError("basket size cannot exceed the universe")
        if self.size < 1:
            raise ConfigError("basket size must be >= 1")


def pearson(x, y) -> float:
    """Product-moment correlation; 0.0 when either input has zero variance."""
    r, _ = pearson_flagged(x, y)
    return r


def pearson_flagged(x, y) -> tuple[float, bool]:
    """Pearson r plus a flag marking the degenerate zero-variance case."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), False


def score_universe(
    traces: dict[str, tuple[np.ndarray, np.ndarray]], window: int
) -> tuple[list[CorrelationScore], list[str]]:
    """Score each symbol's (predicted, actual) trace pair over the last ``window`` points.

    Symbols whose traces are too short or not finite are skipped and reported
    in the audit list. Zero-variance traces score 0 with the degenerate flag.
    """
    if window < 3:
        raise ConfigError("correlation window must be >= 3")
    scores: list[CorrelationScore] = []
    skipped: list[str] = []
    for symbol, (pred, actual) in traces.items():
        pred = np.asarray(pred, dtype=np.float64)
        actual = np.asarray(actual, dtype=np.float64)
        if len(pred) < window or len(actual) < window:
            skipped.append(symbol)
            logger.warning("symbol %s skipped: %d/%d trace points", symbol, min(len(pred), len(actual)), window)
            continue
        p, a = pred[-window:], actual[-window:]
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
            skipped.append(symbol)
            logger.warning("symbol %s skipped: non-finite trace values", symbol)
            continue
        r, degenerate = pearson_flagged(p, a)
        scores.append(CorrelationScore(symbol, r, window, degenerate))
    return scores, skipped


def select_basket(scores: list[CorrelationScore], spec: BasketSpec) -> list[CorrelationScore]:
    """Top-N by descending r; ties break lexicographically by symbol so the
    basket is deterministic regardless of input order."""
    if len(scores) < spec.size:
        raise DataError(f"only {len(scores)} scores for a basket of {spec.size}")
    ranked = sorted(scores, key=lambda s: (-s.r, s.symbol))
    return ranked[: spec.size]


def scores_to_csv(scores: list[CorrelationScore], selected: list[CorrelationScore]) -> str:
    """CSV export: symbol,r,window,rank,selected (rank blank for unselected)."""
    rank = {s.symbol: i + 1 for i, s in enumerate(selected)}
    chosen = set(rank)
    out = io.StringIO()
    out.write("symbol,r,window,rank,selected\n")
    for s in sorted(scores, key=lambda s: (-s.r, s.symbol)):
        out.write(
            f"{s.symbol},{s.r!r},{s.window},{rank.get(s.symbol, '')},{int(s.symbol in chosen)}\n"
        )
    return out.getvalue()
