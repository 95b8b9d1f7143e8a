"""Morlet scalogram and dominant-cycle estimation for adaptive indicator periods.

The transform follows the standard FFT formulation: the analysis window is
linearly detrended, zero-padded, multiplied in the frequency domain by
energy-normalized Morlet daughters on a geometric scale grid, and inverted.
Columns closer to an edge than one wavelet e-folding time (sqrt(2)*scale) are
edge-contaminated and excluded from peak search.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_OMEGA0 = 6.0
DEFAULT_FALLBACK_PERIOD = 20.0


def fourier_factor(omega0: float = DEFAULT_OMEGA0) -> float:
    """Period / scale ratio for the Morlet mother."""
    return 4.0 * math.pi / (omega0 + math.sqrt(2.0 + omega0**2))


@dataclass(frozen=True)
class WaveletConfig:
    """Morlet mother with a geometric period grid from min to max period."""

    min_period: float = 8.0
    max_period: float = 128.0
    scale_ratio: float = 2.0 ** (1.0 / 8.0)
    window: int = 512
    omega0: float = DEFAULT_OMEGA0

    def __post_init__(self):
        if self.min_period < 4:
            raise ConfigError("min_period must be >= 4 bars")
        if self.max_period > self.window / 2:
            raise ConfigError("max_period must be <= window/2")
        if not self.min_period < self.max_period:
            raise ConfigError("min_period must be < max_period")
        if self.scale_ratio <= 1.0:
            raise ConfigError("scale_ratio must exceed 1")

    @property
    def periods(self) -> np.ndarray:
        n = int(math.floor(math.log(self.max_period / self.min_period) / math.log(self.scale_ratio) + 1e-9)) + 1
        return self.min_period * self.scale_ratio ** np.arange(n)

    @property
    def scales(self) -> np.ndarray:
        return self.periods / fourier_factor(self.omega0)


@dataclass(frozen=True)
class CycleEstimate:
    """Dominant wave-cycle length in bars; valid=False means no significant peak."""

    period: float
    power: float
    valid: bool


@dataclass(frozen=True)
class Scalogram:
    """Scale x time power matrix with its cone-of-influence mask (True = usable)."""

    power: np.ndarray
    periods: np.ndarray
    scales: np.ndarray
    in_cone: np.ndarray

    @property
    def n_times(self) -> int:
        return self.power.shape[1]


def _detrend(x: np.ndarray) -> np.ndarray:
    n = len(x)
    t = np.arange(n, dtype=np.float64)
    slope, intercept = np.polyfit(t, x, 1)
    resid = x - (slope * t + intercept)
    # rounding residue on constant/linear input is not signal
    if np.max(np.abs(resid)) <= 1e-10 * max(1.0, np.max(np.abs(x))):
        return np.zeros(n)
    return resid


def _smooth_across_scales(spectrum: np.ndarray, width: int = 5) -> np.ndarray:
    """Boxcar across scale rows with reflect padding; damps single-row noise
    flukes at large scales where few independent columns exist, while genuine
    cycles span several adjacent rows of the Morlet bandwidth anyway."""
    if len(spectrum) < width:
        return spectrum.copy()
    half = width // 2
    padded = np.r_[spectrum[half:0:-1], spectrum, spectrum[-2 : -2 - half : -1]]
    return np.convolve(padded, np.ones(width) / width, mode="valid")


def cwt_power(signal: np.ndarray, cfg: WaveletConfig) -> Scalogram:
    """Morlet power over the last ``cfg.window`` samples of ``signal``.

    The window is linearly detrended before the transform; trend power would
    otherwise swamp cycle power at large scales. Power scales quadratically
    with signal amplitude.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if len(signal) < cfg.window:
        raise ConfigError(f"need at least {cfg.window} samples, got {len(signal)}")
    x = _detrend(signal[-cfg.window :])

    n = cfg.window
    n_fft = int(2 ** math.ceil(math.log2(2 * n)))  # zero-pad against wraparound
    padded = np.zeros(n_fft)
    padded[:n] = x
    fx = np.fft.fft(padded)
    omega = 2.0 * math.pi * np.fft.fftfreq(n_fft, d=1.0)

    scales = cfg.scales
    norm_const = math.pi**-0.25
    power = np.empty((len(scales), n))
    positive = omega > 0
    for i, s in enumerate(scales):
        daughter = np.zeros(n_fft)
        daughter[positive] = (
            norm_const * math.sqrt(2.0 * math.pi * s) * np.exp(-0.5 * (s * omega[positive] - cfg.omega0) ** 2)
        )
        wave = np.fft.ifft(fx * daughter)[:n]
        power[i] = np.abs(wave) ** 2

    efold = math.sqrt(2.0) * scales
    edge = np.minimum(np.arange(n), np.arange(n)[::-1]).astype(np.float64)
    in_cone = edge[None, :] >= efold[:, None]
    return Scalogram(power, cfg.periods, scales, in_cone)


def dominant_cycle(scalogram: Scalogram, cfg: WaveletConfig) -> CycleEstimate:
    """Pick the dominant period from a scalogram.

    The per-scale spectrum is the mean power over that scale's in-cone columns,
    smoothed across adjacent scales; the peak must reach twice the median
    across scales to count as a cycle. The period readout is a power-weighted
    mean over the winning scale's neighborhood at the latest in-cone time
    column, so it tracks the most recent usable data.
    """
    power, in_cone = scalogram.power, scalogram.in_cone
    usable = in_cone.any(axis=1)
    if not usable.any():
        return CycleEstimate(0.0, 0.0, False)

    counts = in_cone.sum(axis=1)
    spectrum = np.zeros(len(power))
    nz = counts > 0
    spectrum[nz] = (power * in_cone).sum(axis=1)[nz] / counts[nz]
    spectrum = _smooth_across_scales(spectrum)
    spectrum[~nz] = -np.inf

    win = int(np.argmax(spectrum))
    peak = spectrum[win]
    if peak <= 0.0:
        return CycleEstimate(0.0, 0.0, False)
    median = float(np.median(spectrum[nz]))
    valid = bool(peak >= 2.0 * median)

    latest = np.where(in_cone, np.arange(scalogram.n_times)[None, :], -1).max(axis=1)
    t_star = int(latest[win])
    lo, hi = max(0, win - 2), min(len(power), win + 3)
    weights, periods = [], []
    for i in range(lo, hi):
        if latest[i] < 0:
            continue
        t_i = min(t_star, int(latest[i]))
        weights.append(power[i, t_i])
        periods.append(scalogram.periods[i])
    weights = np.asarray(weights)
    periods = np.asarray(periods)
    total = weights.sum()
    period = float((weights * periods).sum() / total) if total > 0 else float(scalogram.periods[win])
    return CycleEstimate(period, float(power[win, t_star]), valid)


def estimate_cycle(signal: np.ndarray, cfg: WaveletConfig) -> CycleEstimate:
    """Convenience wrapper: transform then pick the dominant period."""
    return dominant_cycle(cwt_power(signal, cfg), cfg)


def scalogram_to_csv(scalogram: Scalogram) -> str:
    """Rows are scales (labelled by period), columns are time; the chart's
    cycle pane is the winning-scale power over time pulled from these rows."""
    out = io.StringIO()
    header = ["period"] + [str(t) for t in range(scalogram.n_times)]
    out.write(",".join(header) + "\n")
    for i, p in enumerate(scalogram.periods):
        row = [repr(float(p))] + [repr(float(v)) for v in scalogram.power[i]]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def peak_power_trace(scalogram: Scalogram) -> np.ndarray:
    """Max in-cone power per time column (zero where no scale is usable)."""
    masked = np.where(scalogram.in_cone, scalogram.power, 0.0)
    return masked.max(axis=0)
