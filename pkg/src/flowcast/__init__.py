"""Continuous online rate-of-change forecasting for securities.

Subpackages: market data preprocessing, the continuous-time recurrent
predictor, wavelet cycle estimation, fixed/adaptive technical indicators,
correlation-ranked basket selection, the long/short basket backtest, and the
stream runner with chart export.
"""

__version__ = "0.1.0"
