"""Per-step prediction traces and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError
from .timeseries import format_timestamp, parse_timestamp


class _TraceIO:
    COLUMNS: tuple = ()

    def __len__(self):
        return self.timestamps.size

    def to_csv(self, path):
        cols = [np.asarray(getattr(self, c), dtype=np.float64).tolist() for c in self.COLUMNS]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            fh.write("timestamp," + ",".join(self.COLUMNS) + "\n")
            for i, ts in enumerate(self.timestamps):
                fh.write(format_timestamp(ts) + "," + ",".join(repr(c[i]) for c in cols) + "\n")

    def save_samples(self, path):
        if self.samples is None:
            raise ValueError("trace holds no samples")
        np.save(path, np.asarray(self.samples, dtype=np.float64))

    @classmethod
    def empty(cls):
        kw = {f.name: np.zeros(0) for f in fields(cls) if f.name != "samples"}
        kw["timestamps"] = np.zeros(0, dtype="datetime64[s]")
        return cls(**kw)


@dataclass
class FilterTrace(_TraceIO):
    """EnKF summaries in normalized units, one record per assimilated step.

    ``prior_*`` describe the one-step-ahead forecast before the measurement
    of that step is assimilated; ``post_*`` and ``wbias_*`` the analysis.
    """

    timestamps: np.ndarray
    prior_mean: np.ndarray
    prior_sigma: np.ndarray
    post_mean: np.ndarray
    post_sigma: np.ndarray
    wbias_mean: np.ndarray
    wbias_sigma: np.ndarray
    gain_q: np.ndarray
    measurement: np.ndarray
    step_seconds: np.ndarray
    samples: np.ndarray | None = None

    COLUMNS = ("prior_mean", "prior_sigma", "post_mean", "post_sigma", "wbias_mean",
               "wbias_sigma", "gain_q", "measurement", "step_seconds")


@dataclass
class BaselineTrace(_TraceIO):
    """Monte Carlo forecast summaries without assimilation."""

    timestamps: np.ndarray
    prior_mean: np.ndarray
    prior_sigma: np.ndarray
    measurement: np.ndarray
    step_seconds: np.ndarray
    samples: np.ndarray | None = None

    COLUMNS = ("prior_mean", "prior_sigma", "measurement", "step_seconds")


def read_trace(path):
    """Load either trace CSV; the header decides the type."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty trace file", line=1) from None
        rows = [r for r in reader if r]
    for cls in (FilterTrace, BaselineTrace):
        if tuple(header) == ("timestamp",) + cls.COLUMNS:
            break
    else:
        raise SchemaError(f"{path}: unrecognized trace header {header}")
    if not rows:
        raise ParseError(f"{path}: trace has no rows", line=2)
    try:
        ts = np.array([parse_timestamp(r[0]) for r in rows], dtype="datetime64[s]")
        data = np.array([[float(v) for v in r[1:]] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    if data.shape[1] != len(cls.COLUMNS):
        raise ParseError(f"{path}: wrong number of fields")
    kw = {c: data[:, i] for i, c in enumerate(cls.COLUMNS)}
    samples_path = path.with_suffix(".samples.npy")
    samples = np.load(samples_path) if samples_path.exists() else None
    return cls(timestamps=ts, samples=samples, **kw)
