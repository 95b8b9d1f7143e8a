import numpy as np
import pytest

from flowcast.cycle import (
    CycleEstimate,
    WaveletConfig,
    cwt_power,
    dominant_cycle,
    estimate_cycle,
    fourier_factor,
    peak_power_trace,
    scalogram_to_csv,
)
from flowcast.errors import ConfigError

CFG = WaveletConfig()
T = np.arange(512)


def periodogram_peak_period(signal):
    """Independent FFT oracle: period of the strongest spectral line."""
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    spec = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), d=1.0)
    spec[0] = 0.0
    k = int(np.argmax(spec))
    return 1.0 / freqs[k]


class TestConfig:
    def test_default_grid_spans_8_to_128(self):
        p = CFG.periods
        assert p[0] == pytest.approx(8.0)
        assert p[-1] == pytest.approx(128.0)
        assert len(p) == 33
        assert np.allclose(p[1:] / p[:-1], 2 ** (1 / 8))

    def test_invariants_enforced(self):
        with pytest.raises(ConfigError):
            WaveletConfig(min_period=2)
        with pytest.raises(ConfigError):
            WaveletConfig(max_period=300, window=512)

    def test_fourier_factor(self):
        assert fourier_factor(6.0) == pytest.approx(1.0330, abs=1e-4)


class TestCwtPower:
    def test_zero_signal_zero_scalogram(self):
        sg = cwt_power(np.zeros(512), CFG)
        assert np.all(sg.power == 0.0)

    def test_sine_peak_row_matches_periodogram_oracle(self):
        sig = np.sin(2 * np.pi * T / 32)
        oracle = periodogram_peak_period(sig)
        sg = cwt_power(sig, CFG)
        row = int(np.argmin(np.abs(sg.periods - oracle)))
        # the row nearest the oracle period carries the max power at every
        # column that is in-cone for that row
        for t in np.flatnonzero(sg.in_cone[row]):
            usable = np.flatnonzero(sg.in_cone[:, t])
            best = usable[np.argmax(sg.power[usable, t])]
            assert abs(best - row) <= 1

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(4)
        sig = rng.normal(0, 1, 512)
        a = cwt_power(sig, CFG)
        b = cwt_power(3.0 * sig, CFG)
        assert np.allclose(b.power, 9.0 * a.power, rtol=1e-9)

    def test_window_too_short(self):
        with pytest.raises(ConfigError):
            cwt_power(np.zeros(100), CFG)

    def test_uses_last_window_samples(self):
        rng = np.random.default_rng(5)
        tail = rng.normal(0, 1, 512)
        padded = np.r_[rng.normal(0, 1, 100), tail]
        a = cwt_power(tail, CFG)
        b = cwt_power(padded, CFG)
        assert np.allclose(a.power, b.power)

    def test_shift_covariance_within_cone(self):
        # delaying the input by m bars shifts columns by m, deep inside the cone
        rng = np.random.default_rng(6)
        m = 16
        base = rng.normal(0, 1, 512 + m)
        cfg = WaveletConfig(min_period=8, max_period=32, window=512)
        a = cwt_power(base[m:], cfg)        # later window
        b = cwt_power(base[:-m], cfg)       # earlier window: a delayed by m
        # compare columns at least 4 e-foldings from every edge
        margin = int(np.ceil(4 * np.sqrt(2) * cfg.scales.max())) + m
        cols = np.arange(margin, 512 - margin)
        assert np.allclose(a.power[:, cols - m], b.power[:, cols], rtol=1e-5, atol=1e-9)


class TestDominantCycle:
    def test_sine_32(self):
        est = estimate_cycle(np.sin(2 * np.pi * T / 32), CFG)
        assert est.valid
        assert 29 <= est.period <= 35
        # agrees with the independent periodogram oracle
        assert est.period == pytest.approx(periodogram_peak_period(np.sin(2 * np.pi * T / 32)), rel=0.1)

    def test_constant_invalid(self):
        est = estimate_cycle(np.full(512, 100.0), CFG)
        assert not est.valid

    def test_white_noise_usually_invalid(self):
        invalid = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            if not estimate_cycle(rng.normal(0, 1, 512), CFG).valid:
                invalid += 1
        assert invalid >= 60

    def test_mixed_two_sines_favors_heavier(self):
        sig = 3.0 * np.sin(2 * np.pi * T / 64) + np.sin(2 * np.pi * T / 16)
        est = estimate_cycle(sig, CFG)
        assert est.valid
        assert 58 <= est.period <= 70

    def test_amplitude_invariance(self):
        sig = np.sin(2 * np.pi * T / 24)
        a = estimate_cycle(sig, CFG)
        b = estimate_cycle(5.0 * sig, CFG)
        assert a.period == pytest.approx(b.period, rel=1e-12)
        assert b.power == pytest.approx(25 * a.power, rel=1e-9)

    def test_estimate_within_grid_bounds(self):
        est = estimate_cycle(np.sin(2 * np.pi * T / 32), CFG)
        assert CFG.min_period <= est.period <= CFG.max_period


class TestExports:
    def test_scalogram_csv_shape(self):
        sg = cwt_power(np.sin(2 * np.pi * T / 32), CFG)
        lines = scalogram_to_csv(sg).strip().split("\n")
        assert len(lines) == 1 + len(sg.periods)
        assert lines[0].startswith("period,0,1,")
        first = lines[1].split(",")
        assert len(first) == 1 + sg.n_times
        assert float(first[0]) == pytest.approx(8.0)

    def test_peak_power_trace(self):
        sg = cwt_power(np.sin(2 * np.pi * T / 32), CFG)
        trace = peak_power_trace(sg)
        assert trace.shape == (512,)
        assert np.all(trace >= 0)
        # columns outside every cone are zero
        assert trace[0] == 0.0
