"""Deep-LSTM one-step-ahead flow regressor, written directly in numpy.

Architecture (all sizes configurable)::

    inputs (W steps x 6 features: flow, 3 x THP, temperature, choke)
      -> stacked LSTM layers (last hidden state of the top layer)
      -> dense(dense_units) -> PReLU
      -> dense(1) + w_bias -> sigmoid

The scalar bias of the final dense unit is the parameter the ensemble filter
estimates online.  :func:`forward` accepts a per-sample override for it so
ensemble members can share one read-only weights object.

LSTM gate layout inside every ``4H`` block is ``[input, forget, output,
cell]``.  Internally tensors are time-major ``(T, B, ...)`` in chronological
order; the public window arrays are most-recent-first.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDivergedError
from .timeseries import Normalizer, RawSeries, Window, WindowBatch, make_windows, perturb_window
from .traces import BaselineTrace

SCHEMA_VERSION = 1
N_FEATURES = 6
N_THETA = 4


@dataclass(frozen=True)
class ModelConfig:
    lstm_layers: int = 2
    lstm_units: int = 64
    input_noise_sigma: float = 0.1
    dense_units: int = 32
    window: int = 36
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lstm_layers", "lstm_units", "dense_units", "window", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"must be an integer >= 1, got {v!r}", field=name)
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 0:
            raise ConfigError(f"must be an integer >= 0, got {self.epochs!r}", field="epochs")
        if not self.input_noise_sigma >= 0:
            raise ConfigError("must be >= 0", field="input_noise_sigma")
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", field="learning_rate")
        if not self.clip_norm > 0:
            raise ConfigError("must be > 0", field="clip_norm")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known - {"schema_version"})
        if unknown:
            raise ConfigError("unknown field(s): " + ", ".join(unknown))
        try:
            return cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


class ModelWeights:
    """Named parameter tensors plus the config that shaped them.

    ``w_bias`` reads and writes the final output bias.
    """

    def __init__(self, config, params, normalizer=None):
        self.config = config
        self.params = dict(params)
        self.normalizer = normalizer
        self._cast = {}

    @property
    def w_bias(self):
        return float(self.params["dense2.b"])

    @w_bias.setter
    def w_bias(self, value):
        self.params["dense2.b"] = np.array(float(value))
        self._cast.clear()

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()}, self.normalizer)

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def inference_params(self, dtype=np.float64):
        """Parameters prepared for the fast forward path, cast to ``dtype``.

        Cached; the cache is dropped by ``w_bias`` writes and by training.
        Code that edits ``params`` in place must call :meth:`invalidate`.
        """
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = _fast_params(self.params, self.config.lstm_layers, dtype)
        return self._cast[dtype]

    def invalidate(self):
        self._cast.clear()

    def equals(self, other):
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )

    def to_dict(self):
        d = {
            "schema_version": SCHEMA_VERSION,
            "config": asdict(self.config),
            "tensors": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()
            },
        }
        if self.normalizer is not None:
            d["normalizer"] = self.normalizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported weights schema version {version!r}", field="schema_version")
        config = ModelConfig.from_dict(d["config"])
        params = {}
        for k, t in d["tensors"].items():
            a = np.array(t["data"], dtype=np.float64)
            if a.size != math.prod(t["shape"]):
                raise ShapeError(f"tensor {k}: data size {a.size} != shape {t['shape']}")
            params[k] = a.reshape(t["shape"])
        expected = _param_shapes(config)
        if set(params) != set(expected):
            raise ShapeError(f"tensor names {sorted(params)} do not match config")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ShapeError(f"tensor {k}: shape {params[k].shape} != expected {shape}")
        params = {k: params[k] for k in expected}
        norm = Normalizer.from_dict(d["normalizer"]) if "normalizer" in d else None
        return cls(config, params, norm)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _param_shapes(config):
    H, D = config.lstm_units, config.dense_units
    shapes = {}
    f_in = N_FEATURES
    for layer in range(config.lstm_layers):
        shapes[f"lstm{layer}.Wx"] = (f_in, 4 * H)
        shapes[f"lstm{layer}.Wh"] = (H, 4 * H)
        shapes[f"lstm{layer}.b"] = (4 * H,)
        f_in = H
    shapes["dense1.W"] = (H, D)
    shapes["dense1.b"] = (D,)
    shapes["prelu.alpha"] = (D,)
    shapes["dense2.W"] = (D,)
    shapes["dense2.b"] = ()
    return shapes


def _orthogonal(rng, rows, cols):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return np.ascontiguousarray(q if rows >= cols else q.T)


def build_model(config: ModelConfig, rng: np.random.Generator) -> ModelWeights:
    """Initialize weights.

    Input kernels are uniform with variance ``1/fan_in``, recurrent kernels
    orthogonal, biases zero except the forget gate (1.0).  PReLU slopes
    start at 0.25.
    """
    H = config.lstm_units
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".Wx") or name in ("dense1.W", "dense2.W"):
            lim = math.sqrt(3.0 / shape[0])
            params[name] = rng.uniform(-lim, lim, size=shape)
        elif name.endswith(".Wh"):
            params[name] = _orthogonal(rng, *shape)
        elif name == "prelu.alpha":
            params[name] = np.full(shape, 0.25)
        else:
            params[name] = np.zeros(shape)
        if name.startswith("lstm") and name.endswith(".b"):
            params[name][H : 2 * H] = 1.0
    return ModelWeights(config, params)


# ---------------------------------------------------------------------------
# forward / backward


def _sigmoid(x):
    # tanh form is faster than exp and does not overflow
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _input_projection(p, q, theta, u, dtype):
    """Layer-0 pre-activations, time-major ``(T, B, 4H)``.

    ``theta`` and ``u`` may be shared across the batch (no batch axis); the
    projection is then computed once and broadcast.
    """
    Wx, b = p["lstm0.Wx"], p["lstm0.b"]
    qc = q[:, ::-1].T.astype(dtype, copy=False)  # (T, B)
    out = qc[:, :, None] * Wx[0]
    if theta.ndim == 2:
        shared = theta[::-1].astype(dtype, copy=False) @ Wx[1:5]
        out += shared[:, None, :]
    else:
        out += np.ascontiguousarray(theta[:, ::-1].transpose(1, 0, 2), dtype=dtype) @ Wx[1:5]
    if u.ndim == 1:
        out += (u[::-1].astype(dtype, copy=False)[:, None] * Wx[5])[:, None, :]
    else:
        out += u[:, ::-1].T.astype(dtype, copy=False)[:, :, None] * Wx[5]
    out += b
    return out


def _lstm_seq(xproj, Wh, cache=None, keep_seq=True):
    T, B, H4 = xproj.shape
    H = H4 // 4
    h = np.zeros((B, H), dtype=xproj.dtype)
    c = np.zeros((B, H), dtype=xproj.dtype)
    hs = np.empty((T, B, H), dtype=xproj.dtype) if keep_seq else None
    if cache is not None:
        cache["gates"] = np.empty((T, B, H4), dtype=xproj.dtype)
        cache["c"] = np.empty((T, B, H), dtype=xproj.dtype)
        cache["tc"] = np.empty((T, B, H), dtype=xproj.dtype)
    for t in range(T):
        z = xproj[t] if t == 0 else xproj[t] + h @ Wh
        s = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c = s[:, H : 2 * H] * c + s[:, :H] * g
        tc = np.tanh(c)
        h = s[:, 2 * H :] * tc
        if keep_seq:
            hs[t] = h
        if cache is not None:
            cache["gates"][t, :, : 3 * H] = s
            cache["gates"][t, :, 3 * H :] = g
            cache["c"][t] = c
            cache["tc"][t] = tc
    return hs if keep_seq else h


def _fast_params(p, n_layers, dtype):
    """Stack ``[b; Wx; Wh]`` per LSTM layer, halving the sigmoid-gate columns.

    Halving is exact in binary floating point; it lets one in-place tanh
    over the whole gate block serve the sigmoid gates as well
    (``sigmoid(z) = 0.5 * tanh(z / 2) + 0.5``).
    """
    out = {}
    for layer in range(n_layers):
        W = np.concatenate(
            [p[f"lstm{layer}.b"][None, :], p[f"lstm{layer}.Wx"], p[f"lstm{layer}.Wh"]], axis=0
        )
        W[:, : 3 * (W.shape[1] // 4)] *= 0.5
        out[f"lstm{layer}.W"] = np.ascontiguousarray(W, dtype=dtype)
    for k in ("dense1.W", "dense1.b", "prelu.alpha", "dense2.W", "dense2.b"):
        out[k] = np.asarray(p[k], dtype=dtype)
    return out


def _forward_fast(pf, q, theta, u, n_layers, dtype):
    """Inference recurrence, all layers advanced together one step at a time.

    Each layer keeps an input buffer ``[1, x_t, h_{t-1}]`` so the gate
    pre-activations are a single matmul into a preallocated block.
    Returns the top-layer hidden state at the last step.
    """
    B, T = q.shape
    Ws = [pf[f"lstm{layer}.W"] for layer in range(n_layers)]
    H = Ws[0].shape[1] // 4
    xin, bufs, cs = [], [], []
    for W in Ws:
        x = np.zeros((B, W.shape[0]), dtype=dtype)
        x[:, 0] = 1.0
        xin.append(x)
        bufs.append(np.empty((B, 4 * H), dtype=dtype))
        cs.append(np.zeros((B, H), dtype=dtype))
    tc = np.empty((B, H), dtype=dtype)
    tmp = np.empty((B, H), dtype=dtype)
    x0 = xin[0]
    shared_theta = theta.ndim == 2
    shared_u = u.ndim == 1
    for t in range(T):
        k = T - 1 - t  # most-recent-first index of chronological step t
        x0[:, 1] = q[:, k]
        x0[:, 2:6] = theta[k] if shared_theta else theta[:, k]
        x0[:, 6] = u[k] if shared_u else u[:, k]
        for layer, W in enumerate(Ws):
            x, buf, c = xin[layer], bufs[layer], cs[layer]
            np.matmul(x, W, out=buf)
            np.tanh(buf, out=buf)
            s = buf[:, : 3 * H]
            s *= 0.5
            s += 0.5
            np.multiply(buf[:, H : 2 * H], c, out=c)
            np.multiply(buf[:, :H], buf[:, 3 * H :], out=tmp)
            c += tmp
            np.tanh(c, out=tc)
            h = x[:, x.shape[1] - H :]
            np.multiply(buf[:, 2 * H : 3 * H], tc, out=h)
            if layer + 1 < n_layers:
                xin[layer + 1][:, 1 : 1 + H] = h
    return xin[-1][:, -H:]


def _head(p, last):
    a1 = last @ p["dense1.W"] + p["dense1.b"]
    act = np.where(a1 > 0, a1, p["prelu.alpha"] * a1)
    return act @ p["dense2.W"], {"last": last, "a1": a1, "act": act}


def _forward_core(p, q, theta, u, n_layers, caches):
    """Reference forward pass that records per-layer state for backpropagation.

    Returns the head pre-activation without the output bias and the head cache.
    """
    xproj = _input_projection(p, q, theta, u, np.float64)
    caches = [] if caches is None else caches
    for layer in range(n_layers):
        cache = {}
        out = _lstm_seq(xproj, p[f"lstm{layer}.Wh"], cache)
        cache["hs"] = out
        caches.append(cache)
        if layer < n_layers - 1:
            xproj = out @ p[f"lstm{layer + 1}.Wx"] + p[f"lstm{layer + 1}.b"]
    return _head(p, out[-1])


def _as_arrays(window, width):
    q = np.asarray(window.q_hist)
    th = np.asarray(window.theta_hist)
    u = np.asarray(window.u_hist)
    if q.shape[-1:] != (width,):
        raise ShapeError(f"q_hist must end in ({width},), got {q.shape}")
    if th.shape[-2:] != (width, N_THETA):
        raise ShapeError(f"theta_hist must end in ({width}, {N_THETA}), got {th.shape}")
    if u.shape[-1:] != (width,):
        raise ShapeError(f"u_hist must end in ({width},), got {u.shape}")
    return q, th, u


def pre_activation(window, weights: ModelWeights, w_bias=None, dtype=np.float64):
    """Final-unit input before the sigmoid, including the (possibly overridden) bias."""
    q, th, u = _as_arrays(window, weights.config.window)
    scalar = q.ndim == 1
    q2 = q.reshape(-1, q.shape[-1])
    B = q2.shape[0]
    if th.ndim > 2:
        th = th.reshape(B, *th.shape[-2:])
    if u.ndim > 1:
        u = u.reshape(B, u.shape[-1])
    p = weights.inference_params(dtype)
    last = _forward_fast(p, q2, th, u, weights.config.lstm_layers, dtype)
    pre, _ = _head(p, last)
    bias = p["dense2.b"] if w_bias is None else np.asarray(w_bias, dtype=dtype)
    out = pre + bias
    if scalar and out.shape == (1,):
        return float(out[0])
    lead = q.shape[:-1]
    return out.reshape(lead) if out.size == math.prod(lead) else out


def forward(window: Window, weights: ModelWeights, w_bias=None, dtype=np.float64):
    """Deterministic one-step-ahead prediction in normalized flow units.

    ``window`` arrays may carry a leading batch axis; ``theta_hist`` and
    ``u_hist`` without one are shared by the whole batch.  ``w_bias`` replaces
    the stored output bias (scalar or one value per batch row) without
    touching ``weights``.  ``dtype=np.float32`` trades precision for speed.
    """
    pre = pre_activation(window, weights, w_bias, dtype)
    if isinstance(pre, float):
        return float(_sigmoid(pre))
    return _sigmoid(pre)


def _loss_and_grads(p, n_layers, x_q, x_th, x_u, target):
    """MSE over the batch and its gradient for every parameter (float64)."""
    caches = []
    pre, head = _forward_core(p, x_q, x_th, x_u, n_layers, caches=caches)
    pre = pre + p["dense2.b"]
    y = _sigmoid(pre)
    B = y.shape[0]
    err = y - target
    loss = float(np.mean(err**2))

    g = {}
    dpre = (2.0 / B) * err * y * (1.0 - y)
    act, a1, last = head["act"], head["a1"], head["last"]
    g["dense2.W"] = act.T @ dpre
    g["dense2.b"] = np.array(dpre.sum())
    dact = dpre[:, None] * p["dense2.W"]
    pos = a1 > 0
    g["prelu.alpha"] = np.sum(np.where(pos, 0.0, dact * a1), axis=0)
    da1 = np.where(pos, dact, dact * p["prelu.alpha"])
    g["dense1.W"] = last.T @ da1
    g["dense1.b"] = da1.sum(axis=0)
    dlast = da1 @ p["dense1.W"].T

    T = x_q.shape[1]
    dh_seq = None
    for layer in reversed(range(n_layers)):
        cache = caches[layer]
        Wh = p[f"lstm{layer}.Wh"]
        H = Wh.shape[0]
        gates, cs, tcs, hs = cache["gates"], cache["c"], cache["tc"], cache["hs"]
        dz = np.empty_like(gates)
        dh_next = np.zeros((x_q.shape[0], H))
        dc_next = np.zeros((x_q.shape[0], H))
        for t in reversed(range(T)):
            dh = dh_next
            if dh_seq is not None:
                dh = dh + dh_seq[t]
            elif t == T - 1:
                dh = dh + dlast
            i = gates[t, :, :H]
            f = gates[t, :, H : 2 * H]
            o = gates[t, :, 2 * H : 3 * H]
            gg = gates[t, :, 3 * H :]
            tc = tcs[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            c_prev = cs[t - 1] if t > 0 else 0.0
            dz[t, :, :H] = dc * gg * i * (1.0 - i)
            dz[t, :, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[t, :, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            dz[t, :, 3 * H :] = dc * i * (1.0 - gg * gg)
            dc_next = dc * f
            dh_next = dz[t] @ Wh.T
        h_prev = np.concatenate([np.zeros_like(hs[:1]), hs[:-1]], axis=0)
        dz2 = dz.reshape(-1, 4 * H)
        g[f"lstm{layer}.Wh"] = h_prev.reshape(-1, H).T @ dz2
        g[f"lstm{layer}.b"] = dz2.sum(axis=0)
        if layer > 0:
            inp = caches[layer - 1]["hs"]
            g[f"lstm{layer}.Wx"] = inp.reshape(-1, inp.shape[-1]).T @ dz2
            dh_seq = dz @ p[f"lstm{layer}.Wx"].T
        else:
            x = _layer0_inputs(x_q, x_th, x_u)
            g["lstm0.Wx"] = x.reshape(-1, N_FEATURES).T @ dz2
    return loss, {k: g[k] for k in p}


def _layer0_inputs(q, th, u):
    """Chronological time-major feature tensor ``(T, B, 6)``."""
    B, T = q.shape
    th = np.broadcast_to(th, (B, T, N_THETA))
    u = np.broadcast_to(u, (B, T))
    x = np.concatenate([q[:, :, None], th, u[:, :, None]], axis=2)
    return np.ascontiguousarray(x[:, ::-1].transpose(1, 0, 2))


def loss_and_gradients(weights: ModelWeights, batch):
    """Mean-squared error of ``batch`` (a Window with batch axis, or a WindowBatch) and its gradients."""
    q, th, u, target = _batch_arrays(batch, weights.config.window)
    return _loss_and_grads(weights.params, weights.config.lstm_layers, q, th, u, target)


def _batch_arrays(batch, width):
    q, th, u = _as_arrays(batch, width)
    target = np.atleast_1d(np.asarray(batch.target, dtype=np.float64))
    if q.ndim == 1:
        q, th, u = q[None], th[None], u[None]
    return q.astype(np.float64), th.astype(np.float64), u.astype(np.float64), target


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(a), repr(b)])


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        a = self.lr * math.sqrt(1 - self.b2**self.t) / (1 - self.b1**self.t)
        for k, gk in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * gk
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * gk * gk
            params[k] = params[k] - a * self.m[k] / (np.sqrt(self.v[k]) + self.eps)


def evaluate_loss(weights: ModelWeights, data: WindowBatch, chunk=2048):
    """Noise-free MSE over a window batch."""
    total = 0.0
    for s in range(0, len(data), chunk):
        part = data[s : s + chunk]
        y = forward(Window(part.q_hist, part.theta_hist, part.u_hist), weights)
        total += float(np.sum((y - part.target) ** 2))
    return total / len(data)


def train(model: ModelWeights, data: WindowBatch, val: WindowBatch, config: ModelConfig | None = None,
          rng: np.random.Generator | None = None, log=None):
    """Minibatch Adam on MSE with input-noise regularization.

    Gaussian noise of ``input_noise_sigma`` is added to the flow and
    pressure/temperature histories of every training batch (never to the
    choke).  Gradients are clipped to global norm ``clip_norm``.  The
    weights after the last epoch are returned; ``model`` is not modified.

    Returns
    -------
    (ModelWeights, TrainReport)
        ``train_loss`` is the sample-weighted mean of the noisy minibatch
        losses of each epoch, ``val_loss`` the noise-free MSE on ``val``
        after the epoch.
    """
    config = config or model.config
    if len(data) == 0 or len(val) == 0:
        raise ConfigError("training and validation batches must be nonempty")
    if rng is None:
        from ._random import substream

        rng = substream(config.seed, "training")
    weights = model.copy()
    report = TrainReport()
    if config.epochs == 0:
        return weights, report
    p = weights.params
    opt = _Adam(p, config.learning_rate)
    n_layers = model.config.lstm_layers
    sigma = config.input_noise_sigma
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        running = 0.0
        for s in range(0, len(order), config.batch_size):
            part = data[np.sort(order[s : s + config.batch_size])]
            q, th, u, target = _batch_arrays(part, model.config.window)
            if sigma > 0:
                q = q + rng.normal(0.0, sigma, q.shape)
                th = th + rng.normal(0.0, sigma, th.shape)
            loss, grads = _loss_and_grads(p, n_layers, q, th, u, target)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            norm = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
            if norm > config.clip_norm:
                scale = config.clip_norm / norm
                grads = {k: v * scale for k, v in grads.items()}
            opt.step(p, grads)
            running += loss * len(target)
        train_loss = running / len(order)
        weights.invalidate()
        val_loss = evaluate_loss(weights, val)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(epoch, train_loss if not math.isfinite(train_loss) else val_loss)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if log is not None:
            log(epoch, train_loss, val_loss)
    return weights, report


# ---------------------------------------------------------------------------
# verification and Monte Carlo


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: str

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def gradient_check(weights: ModelWeights, window, tolerance=1e-4, n_params=100, rng=None,
                   step=1e-5, grad_fn=None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``n_params`` parameter entries are drawn uniformly from the flattened
    parameter vector.  The relative error of one entry is
    ``|a - n| / max(|a|, |n|, 1e-7)``; the floor keeps entries whose true
    gradient is zero (or below finite-difference resolution) from dividing
    round-off by round-off.  ``grad_fn(weights, window) -> (loss, grads)``
    replaces the analytic route, for mutation testing.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grad_fn = grad_fn or loss_and_gradients
    _, grads = grad_fn(weights, window)
    names = list(weights.params)
    sizes = np.array([weights.params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    work = weights.copy()
    worst, worst_name = 0.0, ""
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[j], int(flat - offsets[j])
        work.params[name] = np.ascontiguousarray(work.params[name])
        arr = work.params[name].reshape(-1) if work.params[name].ndim else None
        orig = float(work.params[name].reshape(-1)[idx])

        def loss_at(val):
            if arr is None:
                work.params[name] = np.array(val)
            else:
                arr[idx] = val
            work.invalidate()
            return batch_loss(work, window)

        num = (loss_at(orig + step) - loss_at(orig - step)) / (2 * step)
        loss_at(orig)
        ana = float(np.asarray(grads[name]).reshape(-1)[idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-7)
        if rel > worst:
            worst, worst_name = rel, f"{name}[{idx}]"
    return GradCheckReport(worst, len(picks), tolerance, worst_name)


def batch_loss(weights, batch):
    q, th, u, target = _batch_arrays(batch, weights.config.window)
    y = forward(Window(q, th, u), weights)
    return float(np.mean((y - target) ** 2))


def predict_mc(window: Window, weights: ModelWeights, norm: Normalizer, n: int, rng: np.random.Generator,
               dtype=np.float64) -> np.ndarray:
    """``n`` forward evaluations on independently perturbed copies of ``window``."""
    if n < 2:
        raise ConfigError("n must be >= 2", field="n")
    sample = perturb_window(window, norm, rng, size=n)
    y = forward(Window(sample.q_hist, sample.theta_hist, window.u_hist), weights, dtype=dtype)
    return np.asarray(y, dtype=np.float64)


def run_baseline(series: RawSeries, weights: ModelWeights, norm: Normalizer, n: int,
                 rng: np.random.Generator, keep_samples=False, dtype="float32") -> BaselineTrace:
    """Monte Carlo forecast of every step of a normalized series, no assimilation."""
    windows = make_windows(series, weights.config.window)
    m = len(windows)
    mean, sd, secs = np.empty(m), np.empty(m), np.empty(m)
    samples = np.empty((m, n)) if keep_samples else None
    q, th, u = windows.q_hist, windows.theta_hist, windows.u_hist
    for i in range(m):
        t0 = time.perf_counter()
        y = predict_mc(Window(q[i], th[i], u[i]), weights, norm, n, rng, dtype=dtype)
        secs[i] = time.perf_counter() - t0
        mean[i] = y.mean()
        sd[i] = y.std(ddof=1)
        if keep_samples:
            samples[i] = y
    return BaselineTrace(windows.timestamps.copy(), mean, sd, windows.target.copy(), secs, samples)
