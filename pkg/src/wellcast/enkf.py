"""Stochastic ensemble Kalman filter over the augmented state ``[q, w_bias]``.

``q`` is the normalized flow and ``w_bias`` the output bias of the forecast
model.  Each step every member is propagated through the model with its own
bias and flow history, perturbed with model noise, and then updated against
the measured flow using perturbed observations.

A forecast model is any object with

* ``trained_bias`` -- the bias the model was trained with,
* ``window`` -- history length,
* ``__call__(q_hist, theta_hist, u_hist, w_bias) -> q_next`` where
  ``q_hist`` is ``(N, window)`` and ``w_bias`` is ``(N,)``; ``theta_hist`` and
  ``u_hist`` are the measured histories shared by all members.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ._random import substream
from .errors import ConfigError, FilterError
from .model import ModelWeights, forward
from .timeseries import WINDOW, Normalizer, RawSeries, Window, make_windows
from .traces import FilterTrace

CONFIG_VERSION = 1


@dataclass(frozen=True)
class FilterConfig:
    n_members: int = 1000
    w_bias_prior_sigma: float = math.sqrt(0.2)
    model_error_cov: tuple = ((1e-6, 0.0), (0.0, 1e-6))
    meas_var: float | None = None
    obs_operator: tuple = (1.0, 0.0)
    inflation: float = 1.0
    seed: int = 0
    inference_dtype: str = "float32"

    def __post_init__(self):
        Q = np.asarray(self.model_error_cov, dtype=np.float64)
        if Q.shape == (2,):
            Q = np.diag(Q)
        if Q.shape != (2, 2):
            raise ConfigError("must be 2x2 (or its diagonal)", field="model_error_cov")
        if not np.allclose(Q, Q.T, rtol=0, atol=0) or np.linalg.eigvalsh(Q).min() < -1e-15:
            raise ConfigError("must be symmetric positive semidefinite", field="model_error_cov")
        object.__setattr__(self, "model_error_cov", tuple(map(tuple, Q.tolist())))
        M = tuple(float(v) for v in np.ravel(self.obs_operator))
        if len(M) != 2:
            raise ConfigError("must have 2 entries", field="obs_operator")
        object.__setattr__(self, "obs_operator", M)
        if not isinstance(self.n_members, (int, np.integer)) or self.n_members < 2:
            raise ConfigError("must be an integer >= 2", field="n_members")
        if not self.w_bias_prior_sigma >= 0:
            raise ConfigError("must be >= 0", field="w_bias_prior_sigma")
        if self.meas_var is not None and not self.meas_var >= 0:
            raise ConfigError("must be >= 0", field="meas_var")
        if not self.inflation > 0:
            raise ConfigError("must be > 0", field="inflation")
        if self.inference_dtype not in ("float32", "float64"):
            raise ConfigError("must be 'float32' or 'float64'", field="inference_dtype")

    @property
    def Q(self):
        return np.array(self.model_error_cov)

    @property
    def M(self):
        return np.array(self.obs_operator)

    def R(self, norm: Normalizer | None = None):
        if self.meas_var is not None:
            return float(self.meas_var)
        if norm is None:
            raise ConfigError("meas_var unset and no normalizer to derive it from", field="meas_var")
        return norm.sigma_flow**2

    def to_dict(self):
        return {"schema_version": CONFIG_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported version {version!r}", field="schema_version")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown field(s): " + ", ".join(unknown))
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Ensemble:
    """Members of the augmented state plus each member's own flow history."""

    q: np.ndarray
    w: np.ndarray
    q_hist: np.ndarray

    def __len__(self):
        return self.q.size

    @property
    def states(self):
        return np.column_stack([self.q, self.w])

    @classmethod
    def from_states(cls, x, q_hist):
        return cls(np.ascontiguousarray(x[:, 0]), np.ascontiguousarray(x[:, 1]), q_hist)

    def advance_history(self):
        """Push every member's current ``q`` onto the front of its history."""
        hist = np.empty_like(self.q_hist)
        hist[:, 0] = self.q
        hist[:, 1:] = self.q_hist[:, :-1]
        return Ensemble(self.q, self.w, hist)


class LSTMForecaster:
    """Adapter exposing :func:`forward` through the forecast-model interface."""

    def __init__(self, weights: ModelWeights, dtype="float32"):
        self.weights = weights
        self.dtype = np.dtype(dtype)
        self.trained_bias = weights.w_bias
        self.window = weights.config.window

    def __call__(self, q_hist, theta_hist, u_hist, w_bias):
        y = forward(Window(q_hist, theta_hist, u_hist), self.weights, w_bias=w_bias, dtype=self.dtype)
        return np.asarray(y, dtype=np.float64)


def _sqrtm_psd(Q):
    lam, V = np.linalg.eigh(Q)
    return V * np.sqrt(np.clip(lam, 0.0, None))


def init_ensemble(trained_bias, config: FilterConfig, window0: Window, norm: Normalizer,
                  rng: np.random.Generator) -> Ensemble:
    """Draw the initial ensemble around the measured history of ``window0``.

    Every member's flow history is the measured one plus independent
    flow-sensor noise; its current flow is the newest entry of that history.
    Biases are ``N(trained_bias, w_bias_prior_sigma**2)``.
    """
    N = config.n_members
    q_meas = np.asarray(window0.q_hist, dtype=np.float64)
    q_hist = q_meas + rng.normal(0.0, 1.0, (N, q_meas.size)) * norm.sigma_flow
    w = trained_bias + rng.normal(0.0, 1.0, N) * config.w_bias_prior_sigma
    return Ensemble(q_hist[:, 0].copy(), w, q_hist)


def predict_step(ens: Ensemble, theta_hist, u_hist, model, config: FilterConfig,
                 rng: np.random.Generator):
    """Propagate every member one step; returns ``(prior, P)``.

    ``q`` moves through the forecast model with the member's own bias and
    history; ``w_bias`` is carried unchanged.  Both receive additive
    ``N(0, Q)`` model noise.  ``P`` is the sample covariance of the prior.
    """
    q_next = np.asarray(model(ens.q_hist, theta_hist, u_hist, ens.w), dtype=np.float64)
    x = np.column_stack([q_next, ens.w])
    x += rng.normal(0.0, 1.0, x.shape) @ _sqrtm_psd(config.Q).T
    if config.inflation != 1.0:
        mean = x.mean(axis=0)
        x = mean + config.inflation * (x - mean)
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FilterError(f"non-finite state for member {i}", member=i)
    # deviations from one member keep an identical ensemble at exactly P = 0
    P = np.cov(x - x[0], rowvar=False, ddof=1)
    return Ensemble.from_states(x, ens.q_hist), P


def kalman_gain(P, M, R):
    """``K = P M^T (M P M^T + R)^-1`` for a scalar measurement; returns shape (2,)."""
    P = np.asarray(P, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64).ravel()
    S = float(M @ P @ M) + float(R)
    if not S > 0:
        raise FilterError(f"innovation variance M P M^T + R = {S} is not positive")
    return (P @ M) / S


def correct_step(prior: Ensemble, z, K, M, R, rng: np.random.Generator) -> Ensemble:
    """Analysis with perturbed observations ``z + eta_i``, ``eta_i ~ N(0, R)``."""
    x = prior.states
    M = np.asarray(M, dtype=np.float64).ravel()
    K = np.asarray(K, dtype=np.float64).ravel()
    eta = rng.normal(0.0, 1.0, len(prior)) * math.sqrt(R) if R > 0 else 0.0
    innov = (z + eta) - x @ M
    xa = x + innov[:, None] * K[None, :]
    return Ensemble.from_states(xa, prior.q_hist)


def run_filter(series: RawSeries, model, config: FilterConfig, norm: Normalizer,
               keep_samples=False, progress=None) -> FilterTrace:
    """Assimilate every step after the first window of a normalized series.

    The first ``window`` rows seed the ensemble; each later row yields one
    trace record (so ``len(series) - window`` records).  Randomness comes from
    the ``init``, ``ensemble`` and ``observation-perturbation`` sub-streams of
    ``config.seed``.
    """
    width = getattr(model, "window", WINDOW)
    if len(series) < width:
        raise FilterError(f"series of length {len(series)} is shorter than the window ({width})")
    if len(series) == width:
        return FilterTrace.empty()
    windows = make_windows(series, width)
    rng_init = substream(config.seed, "init")
    rng_ens = substream(config.seed, "ensemble")
    rng_obs = substream(config.seed, "observation-perturbation")
    R = config.R(norm)
    M = config.M
    n = len(windows)
    out = {c: np.empty(n) for c in FilterTrace.COLUMNS}
    samples = np.empty((n, config.n_members)) if keep_samples else None
    theta, u = windows.theta_hist, windows.u_hist
    target = windows.target
    ens = init_ensemble(model.trained_bias, config, windows[0], norm, rng_init)
    for i in range(n):
        t0 = time.perf_counter()
        try:
            prior, P = predict_step(ens, theta[i], u[i], model, config, rng_ens)
            K = kalman_gain(P, M, R)
            post = correct_step(prior, target[i], K, M, R, rng_obs)
        except FilterError as exc:
            raise FilterError(str(exc), step=i, member=exc.member) from None
        ens = post.advance_history()
        out["step_seconds"][i] = time.perf_counter() - t0
        out["prior_mean"][i] = prior.q.mean()
        out["prior_sigma"][i] = prior.q.std(ddof=1)
        out["post_mean"][i] = post.q.mean()
        out["post_sigma"][i] = post.q.std(ddof=1)
        out["wbias_mean"][i] = post.w.mean()
        out["wbias_sigma"][i] = post.w.std(ddof=1)
        out["gain_q"][i] = K[0]
        out["measurement"][i] = target[i]
        if keep_samples:
            samples[i] = prior.q
        if progress is not None:
            progress(i, n)
    return FilterTrace(timestamps=windows.timestamps.copy(), samples=samples, **out)
