"""``wellcast`` command line: simulate -> train -> baseline -> assimilate -> evaluate -> report.

Every stochastic subcommand draws all randomness from one seed through
named sub-streams, so re-running with the same seed and inputs rewrites the
same bytes (apart from wall-clock timing columns).

Errors are reported on stderr as one JSON object::

    {"error": {"type": "ConfigError", "message": "...", "field": "epochs"}}

with exit code 2 for invalid input and 1 for failures during a run.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._random import substream
from .enkf import FilterConfig, LSTMForecaster, run_filter
from .errors import ConfigError, ParseError, SchemaError, SeriesError, StatsError, WellcastError
from .model import ModelConfig, ModelWeights, build_model, run_baseline, train
from .simulator import FIXTURES, WellScenario, derive_sibling, simulate_well
from .stats import divergence_trace, median_j, normality_scan
from .timeseries import (Normalizer, fit_normalizer, format_timestamp, load_series, make_windows, normalize,
                         write_series)
from .traces import read_trace

SUMMARY_FIELDS = ("run_id", "median_j", "mean_j", "n_steps", "sw_rejections", "sw_alpha",
                  "wallclock_p50_step_s", "wallclock_max_step_s")


class UsageError(WellcastError):
    """Invalid combination of arguments or unusable input files."""


# ---------------------------------------------------------------------------
# helpers


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _read_json(path, what):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at column {exc.colno}: {exc.msg}", line=exc.lineno) from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def _sidecar(out, suffix):
    out = Path(out)
    return out.with_name(out.stem + suffix)


def _ensure_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")


def _rows(series, start, steps, width):
    """Rows ``[start, start + width + steps)``; ``steps=None`` runs to the end."""
    if start < 0 or start >= len(series):
        raise UsageError(f"--start {start} outside the {len(series)} data rows")
    stop = len(series) if steps is None else start + width + steps
    if stop > len(series):
        raise UsageError(f"--steps {steps} from row {start} needs {stop} rows, data has {len(series)}")
    return series.slice(start, stop)


def _load_weights(path):
    try:
        return ModelWeights.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read weights {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    except KeyError as exc:
        raise SchemaError(f"{path}: missing {exc}") from None


def _load_normalizer(path):
    """Normalizer from a standalone JSON or from a weights container."""
    d = _read_json(path, "normalizer")
    if "tensors" in d:
        if "normalizer" not in d:
            raise SchemaError(f"{path}: weights carry no normalizer")
        d = d["normalizer"]
    return Normalizer.from_dict(d)


def _resolve_norm(args, weights):
    if args.normalizer:
        return _load_normalizer(args.normalizer)
    if weights.normalizer is None:
        raise UsageError("weights carry no normalizer; pass --normalizer")
    return weights.normalizer


def _progress(enabled, label):
    if not enabled:
        return None

    def report(i, n):
        if (i + 1) % 200 == 0 or i + 1 == n:
            print(f"{label}: step {i + 1}/{n}", file=sys.stderr, flush=True)

    return report


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    if args.config and args.fixture:
        raise UsageError("pass either --config or --fixture, not both")
    path = args.config or FIXTURES / f"{args.fixture or 'default'}_scenario.json"
    try:
        scenario = WellScenario.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc.strerror}") from None
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if args.days is not None:
        n = int(round(args.days * 144))
        scenario = replace(
            scenario,
            duration=n,
            shutin_schedule=tuple(s for s in scenario.shutin_schedule if s[0] + s[1] <= n),
            choke_schedule=tuple(c for c in scenario.choke_schedule if c[0] < n) or scenario.choke_schedule[:1],
        )
    _ensure_parent(args.out)
    truth = simulate_well(scenario)
    if args.sibling_offset is not None:
        sib_seed = scenario.seed if args.sibling_seed is None else args.sibling_seed
        truth = derive_sibling(truth, args.sibling_offset, sib_seed)
    write_series(truth.series, args.out)
    truth.write_sidecar(_sidecar(args.out, ".truth.csv"))
    truth.scenario.save(_sidecar(args.out, ".scenario.json"))


def cmd_train(args):
    cfg = ModelConfig.from_dict(_read_json(args.config, "model config")) if args.config else ModelConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    cfg = replace(cfg, **overrides)
    if args.seed is None and not args.config:
        raise UsageError("train needs --seed (or a seed in --config)")
    series = load_series(args.data)
    stop = len(series) if args.stop is None else args.stop
    if not 0 <= args.start < stop <= len(series):
        raise UsageError(f"row range [{args.start}, {stop}) invalid for {len(series)} rows")
    series = series.slice(args.start, stop)
    n_val = args.val_rows if args.val_rows is not None else int(round(len(series) * args.val_fraction))
    need = cfg.window + 1
    if n_val < need:
        raise UsageError(f"validation split has {n_val} rows; at least {need} are needed for one window")
    n_train = len(series) - n_val
    if n_train < need:
        raise UsageError(f"training split has {n_train} rows; at least {need} are needed for one window")
    part_train, part_val = series.slice(0, n_train), series.slice(n_train, None)
    norm = fit_normalizer(part_train)
    data = make_windows(normalize(part_train, norm), cfg.window)
    val = make_windows(normalize(part_val, norm), cfg.window)
    _ensure_parent(args.out)
    init = build_model(cfg, substream(cfg.seed, "init"))
    log = None
    if args.verbose:
        def log(epoch, tl, vl):
            print(f"epoch {epoch}/{cfg.epochs}: train {tl:.6g} val {vl:.6g}", file=sys.stderr, flush=True)
    weights, report = train(init, data, val, cfg, rng=substream(cfg.seed, "training"), log=log)
    weights.normalizer = norm
    weights.save(args.out)
    norm.save(_sidecar(args.out, ".normalizer.json"))
    report.to_csv(_sidecar(args.out, ".loss.csv"))


def cmd_baseline(args):
    if args.seed is None:
        raise UsageError("baseline needs --seed")
    weights = _load_weights(args.weights)
    norm = _resolve_norm(args, weights)
    series = _rows(load_series(args.data), args.start, args.steps, weights.config.window)
    _ensure_parent(args.out)
    trace = run_baseline(normalize(series, norm), weights, norm, args.samples, substream(args.seed, "mc"),
                         keep_samples=not args.no_samples, dtype=args.dtype)
    trace.to_csv(args.out)
    if not args.no_samples:
        trace.save_samples(_sidecar(args.out, ".samples.npy"))


def cmd_assimilate(args):
    cfg = FilterConfig.from_dict(_read_json(args.config, "filter config")) if args.config else FilterConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("n_members", args.members),
                                   ("inference_dtype", args.dtype)) if v is not None}
    cfg = replace(cfg, **overrides)
    if args.seed is None and not args.config:
        raise UsageError("assimilate needs --seed (or a seed in --config)")
    weights = _load_weights(args.weights)
    norm = _resolve_norm(args, weights)
    series = _rows(load_series(args.data), args.start, args.steps, weights.config.window)
    _ensure_parent(args.out)
    model = LSTMForecaster(weights, dtype=cfg.inference_dtype)
    trace = run_filter(normalize(series, norm), model, cfg, norm, keep_samples=not args.no_samples,
                       progress=_progress(args.verbose, "assimilate"))
    trace.to_csv(args.out)
    if not args.no_samples:
        trace.save_samples(_sidecar(args.out, ".samples.npy"))


def _run_ids(paths):
    ids, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        ids.append(stem if seen[stem] == 1 else f"{stem}-{seen[stem]}")
    return ids


def _align(trace, series, norm, path):
    """Normalized measurements of ``series`` at the trace timestamps."""
    idx = np.searchsorted(series.timestamps, trace.timestamps)
    ok = (idx < len(series)) & (series.timestamps[np.minimum(idx, len(series) - 1)] == trace.timestamps)
    if not ok.all():
        bad = trace.timestamps[np.flatnonzero(~ok)[0]]
        raise SeriesError(f"{path}: timestamp {bad} not found in the data")
    z = (series.flow[idx] - norm.offset[0]) / norm.range[0]
    gap = np.abs(z - trace.measurement)
    if np.any(gap > 1e-9 * np.maximum(1.0, np.abs(z))):
        i = int(np.argmax(gap))
        raise SeriesError(f"{path}: measurement at {trace.timestamps[i]} disagrees with the data "
                          f"({trace.measurement[i]!r} vs {z[i]!r}); wrong data file or normalizer?")
    return z


def cmd_evaluate(args):
    norm = _load_normalizer(args.normalizer)
    series = load_series(args.data)
    _ensure_parent(args.out)
    runs, ids = [], _run_ids(args.traces)
    for path, run_id in zip(args.traces, ids):
        try:
            trace = read_trace(path)
        except OSError as exc:
            raise UsageError(f"cannot read trace {path}: {exc.strerror}") from None
        z = _align(trace, series, norm, path)
        meas = np.column_stack([z, np.full(z.size, norm.sigma_flow)])
        j = divergence_trace(np.column_stack([trace.prior_mean, trace.prior_sigma]), meas)
        j_csv = _sidecar(args.out, f".{run_id}.j.csv")
        with j_csv.open("w", encoding="utf-8") as fh:
            fh.write("step,timestamp,prior_mean,prior_sigma,measurement,j_divergence\n")
            for i, ts in enumerate(trace.timestamps):
                fh.write(f"{i},{format_timestamp(ts)},{trace.prior_mean[i]!r},"
                         f"{trace.prior_sigma[i]!r},{z[i]!r},{float(j[i])!r}\n")
        sw = None
        if trace.samples is not None:
            try:
                report = normality_scan(trace.samples, alpha=args.alpha)
            except StatsError as exc:
                print(f"warning: {path}: normality scan skipped ({exc})", file=sys.stderr)
            else:
                report.to_csv(_sidecar(args.out, f".{run_id}.normality.csv"), trace.timestamps)
                sw = report.rejections
        else:
            print(f"warning: {path}: no samples sidecar, normality scan skipped", file=sys.stderr)
        secs = trace.step_seconds
        runs.append({
            "run_id": run_id,
            "median_j": _finite_or_none(median_j(j)),
            "mean_j": _finite_or_none(float(np.mean(j))),
            "n_steps": int(j.size),
            "sw_rejections": sw,
            "sw_alpha": float(args.alpha),
            "wallclock_p50_step_s": float(np.median(secs)),
            "wallclock_max_step_s": float(np.max(secs)),
            "trace": Path(path).name,
        })
    _write_json(args.out, {"runs": runs, "comparison": _compare(runs, ids, args.traces)})


def _compare(runs, ids, paths):
    """Lowest median J wins; equal medians are a tie.  ``None`` (infinite) loses."""
    key = [r["median_j"] if r["median_j"] is not None else math.inf for r in runs]
    best = min(key)
    leaders = [r["run_id"] for r, k in zip(runs, key) if k == best]
    return {
        "metric": "median_j",
        "ranking": [r["run_id"] for _, r in sorted(zip(key, runs), key=lambda t: t[0])],
        "winner": leaders[0] if len(leaders) == 1 else None,
        "tie": len(leaders) > 1,
    }


def cmd_report(args):
    summary = _read_json(args.summary, "summary")
    if "runs" not in summary:
        raise SchemaError(f"{args.summary}: not an evaluate summary")
    _ensure_parent(args.out)
    lines = ["| run | median J | mean J | steps | SW rejections | p50 step s | max step s |",
             "|---|---|---|---|---|---|---|"]

    def fmt(v, spec):
        return "inf" if v is None else format(v, spec)

    for r in summary["runs"]:
        sw = "n/a" if r["sw_rejections"] is None else f"{r['sw_rejections']}/{r['n_steps']}"
        lines.append(f"| {r['run_id']} | {fmt(r['median_j'], '.4g')} | {fmt(r['mean_j'], '.4g')} | "
                     f"{r['n_steps']} | {sw} | {r['wallclock_p50_step_s']:.3g} | {r['wallclock_max_step_s']:.3g} |")
    comp = summary.get("comparison", {})
    if comp.get("tie"):
        verdict = "tie on median J"
    elif comp.get("winner"):
        verdict = f"lowest median J: {comp['winner']}"
    else:
        verdict = "no comparison"
    Path(args.out).write_text("\n".join(lines + ["", verdict, ""]), encoding="utf-8")
    if not args.quiet:
        print("\n".join(lines + ["", verdict]))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="wellcast", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--seed", type=int, help="master seed (overrides the config file)")
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--out", required=True, help="primary output path")
        sp.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")

    s = sub.add_parser("simulate", help="generate a synthetic well")
    common(s, "scenario JSON")
    s.add_argument("--fixture", choices=("default", "ci"), help="shipped scenario (default: default)")
    s.add_argument("--days", type=float, help="truncate the scenario to this many days")
    s.add_argument("--sibling-offset", type=float, help="emit the sibling well with this normalized flow offset")
    s.add_argument("--sibling-seed", type=int, help="noise seed of the sibling (default: --seed)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the LSTM on a chronological split")
    common(s, "model config JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--start", type=int, default=0, help="first data row used")
    s.add_argument("--stop", type=int, help="one past the last data row used")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--val-fraction", type=float, default=0.2, help="trailing fraction held out (default 0.2)")
    g.add_argument("--val-rows", type=int, help="trailing rows held out")
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.set_defaults(func=cmd_train)

    def run_args(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--weights", required=True)
        sp.add_argument("--normalizer", help="override the normalizer stored with the weights")
        sp.add_argument("--start", type=int, default=0, help="first data row (start of the first window)")
        sp.add_argument("--steps", type=int, help="number of predicted steps (default: to the end)")
        sp.add_argument("--dtype", choices=("float32", "float64"), help="inference precision")
        sp.add_argument("--no-samples", action="store_true", help="skip the per-step samples sidecar")

    s = sub.add_parser("baseline", help="Monte Carlo forecast without assimilation")
    common(s, "unused")
    run_args(s)
    s.add_argument("--samples", type=int, default=1000)
    s.set_defaults(func=cmd_baseline, dtype="float32")

    s = sub.add_parser("assimilate", help="EnKF forecast with online bias estimation")
    common(s, "filter config JSON")
    run_args(s)
    s.add_argument("--members", type=int, help="ensemble size (overrides the config)")
    s.set_defaults(func=cmd_assimilate)

    s = sub.add_parser("evaluate", help="J-divergence and normality summaries of traces")
    common(s, "unused")
    s.add_argument("traces", nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--normalizer", required=True, help="normalizer JSON or weights container")
    s.add_argument("--alpha", type=float, default=0.05)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="markdown table from an evaluate summary")
    s.add_argument("summary")
    s.add_argument("--out", required=True)
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def _error_payload(exc):
    d = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "line", "step", "member", "epoch", "timestamp"):
        v = getattr(exc, attr, None)
        if v is not None:
            d[attr] = v if isinstance(v, (int, float, str)) else str(v)
    return {"error": d}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (UsageError, ConfigError, SeriesError, StatsError) as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 2
    except WellcastError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
