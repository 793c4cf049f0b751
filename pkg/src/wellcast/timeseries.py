"""Well sensor time series: ingestion, normalization and windowing.

A series holds six channels sampled every 10 minutes::

    flow_rate, thp_1, thp_2, thp_3, temperature, choke

The model consumes sliding windows of ``width`` steps.  Inside a window every
history is ordered most-recent-first, so for the window whose current step
is ``n``::

    q_hist[k]     = flow(n - k)
    theta_hist[k] = (thp_1, thp_2, thp_3, temperature)(n - k)
    u_hist[k]     = choke(n + 1 - k)
    target        = flow(n + 1)

The choke history is shifted one step forward because the valve setting is
the control applied over the predicted interval.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GapError, ParseError, SchemaError, SeriesError

CHANNELS = ("flow_rate", "thp_1", "thp_2", "thp_3", "temperature", "choke")
FLOW = 0
THETA = slice(1, 5)
CHOKE = 5
STEP = np.timedelta64(600, "s")
WINDOW = 36

# Scaled standard deviations of the normalized channels (sensor accuracy
# already converted and divided by the reference-well range).
DEFAULT_SIGMA_SCALED = {
    "flow_rate": 0.003,
    "thp_1": 0.01,
    "thp_2": 0.01,
    "thp_3": 0.01,
    "temperature": 0.04,
    "choke": 0.0,
}


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawSeries:
    """Timestamped six-channel record on a fixed 10-minute grid.

    ``normalized`` marks series produced by :func:`normalize`; the physical
    invariants (choke in [0, 1], nonnegative flow) are only enforced on raw
    series since normalized values of other wells may leave [0, 1].
    """

    timestamps: np.ndarray
    values: np.ndarray
    normalized: bool = False
    channels: tuple = field(default=CHANNELS)

    def __post_init__(self):
        ts = np.asarray(self.timestamps).astype("datetime64[s]")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] != len(CHANNELS):
            raise SchemaError(f"values must have shape (T, {len(CHANNELS)}), got {vals.shape}")
        if tuple(self.channels) != CHANNELS:
            raise SchemaError(f"channels must be {CHANNELS}, got {tuple(self.channels)}")
        if ts.shape != (vals.shape[0],):
            raise SchemaError("timestamps and values have different lengths")
        _check_spacing(ts)
        if not np.all(np.isfinite(vals)):
            row, col = np.argwhere(~np.isfinite(vals))[0]
            raise SeriesError(f"non-finite {CHANNELS[col]} at {ts[row]}")
        if not self.normalized:
            choke = vals[:, CHOKE]
            bad = np.flatnonzero((choke < 0.0) | (choke > 1.0))
            if bad.size:
                raise SeriesError(f"choke {choke[bad[0]]} outside [0, 1] at {ts[bad[0]]}")
            bad = np.flatnonzero(vals[:, FLOW] < 0.0)
            if bad.size:
                raise SeriesError(f"negative flow_rate {vals[bad[0], FLOW]} at {ts[bad[0]]}")
        object.__setattr__(self, "timestamps", _readonly(ts))
        object.__setattr__(self, "values", _readonly(vals))
        object.__setattr__(self, "channels", CHANNELS)

    def __len__(self):
        return self.values.shape[0]

    @property
    def flow(self):
        return self.values[:, FLOW]

    @property
    def theta(self):
        """Pressures and temperature, shape (T, 4)."""
        return self.values[:, THETA]

    @property
    def choke(self):
        return self.values[:, CHOKE]

    def channel(self, name):
        return self.values[:, CHANNELS.index(name)]

    def slice(self, start=None, stop=None):
        """Contiguous sub-series ``[start, stop)``."""
        return RawSeries(self.timestamps[start:stop], self.values[start:stop], self.normalized)


def _check_spacing(ts):
    if ts.size < 2:
        return
    d = np.diff(ts)
    bad = np.flatnonzero(d != STEP)
    if bad.size:
        i = bad[0]
        if d[i] <= np.timedelta64(0, "s"):
            raise GapError(f"timestamps not strictly increasing at {ts[i + 1]}", ts[i + 1])
        raise GapError(
            f"spacing {d[i].astype(int)} s before {ts[i + 1]} (expected 600 s)", ts[i + 1]
        )


def parse_timestamp(text):
    """ISO-8601 text to ``datetime64[s]``; aware times are converted to UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_timestamp(ts):
    return str(np.datetime64(ts, "s"))


def load_series(path):
    """Read a CSV file with header ``timestamp,flow_rate,thp_1,thp_2,thp_3,temperature,choke``.

    Column order is free; extra columns are ignored.  Missing values are
    rejected rather than imputed.

    Raises
    ------
    SchemaError
        A required column is absent.
    ParseError
        A row is malformed (wrong field count, empty or non-numeric value).
    GapError
        Timestamps are not strictly increasing at exactly 10-minute spacing.
    SeriesError
        Physical invariants are violated (choke outside [0, 1], negative flow).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        required = ("timestamp",) + CHANNELS
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")
        cols = [header.index(c) for c in required]
        stamps, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line_no)
            try:
                stamps.append(parse_timestamp(row[cols[0]]))
            except ValueError as exc:
                raise ParseError(f"bad timestamp {row[cols[0]]!r}: {exc}", line=line_no) from None
            try:
                rows.append([float(row[c]) for c in cols[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
    if not rows:
        raise ParseError("no data rows", line=2)
    return RawSeries(np.array(stamps, dtype="datetime64[s]"), np.array(rows))


def write_series(series, path):
    """Write a series in the CSV schema read by :func:`load_series`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp," + ",".join(CHANNELS) + "\n")
        for ts, row in zip(series.timestamps, series.values.tolist()):
            fh.write(format_timestamp(ts) + "," + ",".join(map(repr, row)) + "\n")


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine scaling ``x -> (x - offset) / range``.

    ``sigma_scaled`` is the measurement standard deviation of each channel in
    normalized units.
    """

    offset: np.ndarray
    range: np.ndarray
    sigma_scaled: np.ndarray
    channels: tuple = field(default=CHANNELS)

    def __post_init__(self):
        for name in ("offset", "range", "sigma_scaled"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (len(self.channels),):
                raise SchemaError(f"{name} must have one entry per channel")
            object.__setattr__(self, name, _readonly(a))
        object.__setattr__(self, "channels", tuple(self.channels))
        if np.any(~(self.range > 0)):
            bad = self.channels[int(np.flatnonzero(~(self.range > 0))[0])]
            raise SeriesError(f"range of channel {bad} must be > 0")
        if np.any(self.sigma_scaled < 0):
            raise SeriesError("sigma_scaled must be nonnegative")

    @property
    def sigma_flow(self):
        return float(self.sigma_scaled[FLOW])

    @property
    def sigma_theta(self):
        return self.sigma_scaled[THETA]

    def with_sigma(self, sigma_scaled):
        return Normalizer(self.offset, self.range, sigma_scaled, self.channels)

    def to_dict(self):
        return {
            c: {
                "offset": float(self.offset[i]),
                "range": float(self.range[i]),
                "sigma_scaled": float(self.sigma_scaled[i]),
            }
            for i, c in enumerate(self.channels)
        }

    @classmethod
    def from_dict(cls, d):
        try:
            chans = tuple(d)
            return cls(
                [d[c]["offset"] for c in chans],
                [d[c]["range"] for c in chans],
                [d[c]["sigma_scaled"] for c in chans],
                chans,
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed normalizer record: {exc}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_normalizer(reference: RawSeries, accuracy: Mapping[str, float] | None = None) -> Normalizer:
    """Fit offset/range on a reference well.

    ``accuracy`` optionally maps channel names to manufacturer accuracies in
    raw units, read as 95 % half-widths (2 sigma).  Their scaled standard
    deviation is ``accuracy / 2 / range``.  Channels not listed keep the
    default scaled deviations.
    """
    if len(reference) == 0:
        raise SeriesError("reference series is empty")
    lo = reference.values.min(axis=0)
    rng = reference.values.max(axis=0) - lo
    flat = [c for c, r in zip(CHANNELS, rng) if not r > 0]
    if flat:
        raise SeriesError(f"constant channel(s) in reference: {', '.join(flat)}")
    sigma = np.array([DEFAULT_SIGMA_SCALED[c] for c in CHANNELS])
    for name, acc in (accuracy or {}).items():
        if name not in CHANNELS:
            raise SchemaError(f"unknown channel {name!r}")
        i = CHANNELS.index(name)
        sigma[i] = float(acc) / 2.0 / rng[i]
    return Normalizer(lo, rng, sigma)


def _check_channels(series, norm):
    if tuple(norm.channels) != tuple(series.channels):
        raise SchemaError(f"normalizer channels {norm.channels} != series channels {series.channels}")


def normalize(series: RawSeries, norm: Normalizer) -> RawSeries:
    _check_channels(series, norm)
    if series.normalized:
        raise SeriesError("series is already normalized")
    return RawSeries(series.timestamps, (series.values - norm.offset) / norm.range, normalized=True)


def denormalize(series: RawSeries, norm: Normalizer) -> RawSeries:
    _check_channels(series, norm)
    if not series.normalized:
        raise SeriesError("series is not normalized")
    return RawSeries(series.timestamps, series.values * norm.range + norm.offset, normalized=False)


def denormalize_flow(q, norm):
    return np.asarray(q) * norm.range[FLOW] + norm.offset[FLOW]


@dataclass(frozen=True)
class Window:
    """One model input window (or a stack of perturbed copies of one).

    Arrays may carry leading batch dimensions: ``q_hist`` is ``(..., W)``,
    ``theta_hist`` is ``(..., W, 4)`` and ``u_hist`` is ``(..., W)``.
    """

    q_hist: np.ndarray
    theta_hist: np.ndarray
    u_hist: np.ndarray
    target: float = float("nan")
    index: int = -1


class WindowBatch:
    """All one-step-ahead windows of a series, materialized on access.

    ``index[i]`` is the current step ``n`` of window ``i``.
    """

    def __init__(self, series, width=WINDOW, index=None):
        self.series = series
        self.width = width
        w = width
        self._q = sliding_window_view(series.flow, w)[:, ::-1]
        self._theta = sliding_window_view(series.theta, w, axis=0).transpose(0, 2, 1)[:, ::-1]
        self._u = sliding_window_view(series.choke, w)[:, ::-1]
        if index is None:
            index = np.arange(w - 1, len(series) - 1)
        self.index = np.asarray(index, dtype=np.int64)

    def __len__(self):
        return self.index.size

    @property
    def q_hist(self):
        return self._q[self.index - (self.width - 1)]

    @property
    def theta_hist(self):
        return self._theta[self.index - (self.width - 1)]

    @property
    def u_hist(self):
        return self._u[self.index - (self.width - 2)]

    @property
    def target(self):
        return self.series.flow[self.index + 1]

    @property
    def timestamps(self):
        """Timestamps of the predicted (target) steps."""
        return self.series.timestamps[self.index + 1]

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            n = int(self.index[item])
            k = n - (self.width - 1)
            return Window(
                self._q[k], self._theta[k], self._u[k + 1], float(self.series.flow[n + 1]), n
            )
        return WindowBatch(self.series, self.width, self.index[item])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def make_windows(series: RawSeries, width: int = WINDOW) -> WindowBatch:
    """One window per valid target; ``len(series) - width`` windows in total."""
    if width < 1:
        raise SeriesError("width must be >= 1")
    if len(series) < width + 1:
        raise SeriesError(f"series of length {len(series)} is too short for width {width} (need {width + 1})")
    return WindowBatch(series, width)


def perturb_window(window: Window, norm: Normalizer, rng: np.random.Generator, size=None) -> Window:
    """Add Gaussian sensor noise to the flow and pressure/temperature histories.

    The choke history is returned untouched.  With ``size`` the result
    stacks ``size`` independent draws along a new leading axis.
    """
    q = np.asarray(window.q_hist, dtype=np.float64)
    th = np.asarray(window.theta_hist, dtype=np.float64)
    shape = q.shape if size is None else (size,) + q.shape
    q_noise = rng.normal(0.0, 1.0, shape) * norm.sigma_flow
    th_noise = rng.normal(0.0, 1.0, shape + th.shape[-1:]) * norm.sigma_theta
    return Window(q + q_noise, th + th_noise, window.u_hist, window.target, window.index)
