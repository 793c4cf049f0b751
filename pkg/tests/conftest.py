import numpy as np
import pytest

from wellcast.model import ModelConfig, build_model
from wellcast.timeseries import CHANNELS, STEP, RawSeries, fit_normalizer, normalize


def make_series(n, seed=0, start="2012-03-10T00:00:00", flow_scale=50.0):
    """Smooth random six-channel series with a valid choke and nonnegative flow."""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    ts = np.datetime64(start, "s") + t * STEP
    vals = np.empty((n, len(CHANNELS)))
    vals[:, 0] = flow_scale * (1.2 + np.sin(t / 17.0)) + rng.uniform(0, 1, n)
    for k in range(1, 4):
        vals[:, k] = 80 + 10 * np.cos(t / (11.0 + k)) + rng.normal(0, 0.5, n)
    vals[:, 4] = 40 + 5 * np.sin(t / 29.0) + rng.normal(0, 0.3, n)
    vals[:, 5] = 0.2 + 0.6 * (np.sin(t / 41.0) > 0) + rng.uniform(0, 0.1, n)
    return RawSeries(ts, vals)


@pytest.fixture
def series():
    return make_series(400)


@pytest.fixture
def norm(series):
    return fit_normalizer(series)


@pytest.fixture
def nseries(series, norm):
    return normalize(series, norm)


@pytest.fixture
def small_config():
    return ModelConfig(lstm_layers=2, lstm_units=6, dense_units=4, epochs=2, batch_size=16)


@pytest.fixture
def small_model(small_config):
    return build_model(small_config, np.random.default_rng(3))


# one verdict line per acceptance criterion, repeated in the terminal summary
CRITERIA = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
