"""One-step-ahead gas-well flow forecasting with an LSTM whose output bias is
tracked online by a stochastic ensemble Kalman filter.

Modules
-------
timeseries
    Sensor series, normalization and sliding windows.
model
    Numpy LSTM regressor, training, gradient check and Monte Carlo baseline.
enkf
    Augmented-state ensemble Kalman filter.
stats
    Gaussian divergences, Shapiro-Wilk and trace summaries.
simulator
    Synthetic wells with decline, salt build-up and wash cycles.
cli
    ``wellcast`` command-line pipeline.
"""

from .enkf import FilterConfig, LSTMForecaster, kalman_gain, run_filter
from .errors import WellcastError
from .model import ModelConfig, ModelWeights, build_model, forward, gradient_check, predict_mc, run_baseline, train
from .simulator import WellScenario, derive_sibling, load_fixture, simulate_well
from .stats import (GaussianSummary, divergence_trace, fit_gaussian, gaussian_kl, jeffreys_j, median_j,
                    normality_scan, shapiro_wilk)
from .timeseries import (Normalizer, RawSeries, Window, denormalize, fit_normalizer, load_series, make_windows,
                         normalize, write_series)
from .traces import BaselineTrace, FilterTrace, read_trace

__version__ = "0.1.0"

__all__ = [
    "BaselineTrace", "FilterConfig", "FilterTrace", "GaussianSummary", "LSTMForecaster", "ModelConfig",
    "ModelWeights", "Normalizer", "RawSeries", "WellScenario", "WellcastError", "Window", "build_model",
    "denormalize", "derive_sibling", "divergence_trace", "fit_gaussian", "fit_normalizer", "forward",
    "gaussian_kl", "gradient_check", "jeffreys_j", "kalman_gain", "load_fixture", "load_series",
    "make_windows", "median_j", "normality_scan", "normalize", "predict_mc", "read_trace", "run_baseline",
    "run_filter", "shapiro_wilk", "simulate_well", "train", "write_series",
]
