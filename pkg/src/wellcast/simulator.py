"""Synthetic gas-well generator.

A deliberately simple surrogate producing the qualitative regimes needed to
exercise the forecasting and assimilation code: a slow reservoir decline,
salt build-up that throttles deliverability and is partly removed by each
shut-in wash, choke-controlled production, and sibling wells whose flow is
offset from the original.

Per 10-minute step, while producing::

    p_res   = p_res0 * exp(-decline_rate * t_days)
    p_tub   = p_res * (1 - thp_drawdown * choke)
    flow    = productivity * choke * sqrt(p_res^2 - p_tub^2) / (1 + salt)
              * (1 + flush_amplitude * exp(-steps_since_open / flush_steps))
    salt   += salt_growth_rate * dt_days

At the first step of every shut-in the salt resistance is multiplied by
``1 - wash_reset_fraction``; during the shut-in flow is zero, the recorded
choke is zero and the tubing pressure builds towards ``p_res``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._random import substream
from .errors import ConfigError
from .timeseries import CHANNELS, STEP, RawSeries, format_timestamp, parse_timestamp

STEPS_PER_DAY = 144
DT_DAYS = 1.0 / STEPS_PER_DAY
SCENARIO_VERSION = 1


@dataclass(frozen=True)
class WellScenario:
    duration: int
    reservoir_pressure0: float = 200.0
    decline_rate: float = 2e-4
    salt_growth_rate: float = 0.05
    wash_reset_fraction: float = 0.8
    shutin_schedule: tuple = ()
    choke_schedule: tuple = ((0, 0.6),)
    bias_offset: float = 0.0
    noise: dict = field(default_factory=lambda: {"flow_rate": 0.5, "thp": 0.9, "temperature": 1.6})
    seed: int = 0
    start_time: str = "2009-01-01T00:00:00"
    productivity: float = 1.0
    thp_drawdown: float = 0.5
    buildup_steps: float = 12.0
    flush_amplitude: float = 0.15
    flush_steps: float = 18.0
    temperature_ambient: float = 15.0
    temperature_rise: float = 40.0
    temperature_steps: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "shutin_schedule", tuple(tuple(int(v) for v in s) for s in self.shutin_schedule))
        object.__setattr__(
            self, "choke_schedule", tuple((int(s), float(v)) for s, v in self.choke_schedule)
        )
        object.__setattr__(self, "noise", dict(self.noise))
        self.validate()

    def validate(self):
        if not isinstance(self.duration, (int, np.integer)) or self.duration < 1:
            raise ConfigError("must be an integer >= 1", field="duration")
        for name in ("decline_rate", "salt_growth_rate", "productivity", "buildup_steps",
                     "flush_amplitude", "flush_steps", "temperature_steps"):
            if not getattr(self, name) >= 0:
                raise ConfigError("must be >= 0", field=name)
        if not self.reservoir_pressure0 > 0:
            raise ConfigError("must be > 0", field="reservoir_pressure0")
        if not 0.0 <= self.wash_reset_fraction <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="wash_reset_fraction")
        if not 0.0 <= self.thp_drawdown <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="thp_drawdown")
        if not self.choke_schedule:
            raise ConfigError("must not be empty", field="choke_schedule")
        prev = -1
        for i, (start, value) in enumerate(self.choke_schedule):
            if start <= prev or not 0 <= start < self.duration:
                raise ConfigError(f"entry {i}: starts must increase and lie in [0, duration)",
                                  field="choke_schedule")
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"entry {i}: choke {value} outside [0, 1]", field="choke_schedule")
            prev = start
        end = 0
        for i, item in enumerate(self.shutin_schedule):
            if len(item) != 2:
                raise ConfigError(f"entry {i}: expected (start, length)", field="shutin_schedule")
            start, length = item
            if length < 1 or start < end or start + length > self.duration:
                raise ConfigError(f"entry {i}: intervals must be ordered, disjoint and within duration",
                                  field="shutin_schedule")
            end = start + length
        for k in ("flow_rate", "thp", "temperature"):
            if k not in self.noise or not self.noise[k] >= 0:
                raise ConfigError(f"needs a nonnegative '{k}' entry", field="noise")
        try:
            parse_timestamp(self.start_time)
        except ValueError as exc:
            raise ConfigError(str(exc), field="start_time") from None

    def to_dict(self):
        d = asdict(self)
        d["shutin_schedule"] = [list(s) for s in self.shutin_schedule]
        d["choke_schedule"] = [list(s) for s in self.choke_schedule]
        return {"schema_version": SCENARIO_VERSION, **d}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCENARIO_VERSION)
        if version != SCENARIO_VERSION:
            raise ConfigError(f"unsupported version {version!r}", field="schema_version")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown field(s): " + ", ".join(unknown))
        if "duration" not in d:
            raise ConfigError("required", field="duration")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                              line=exc.lineno) from None
        if not isinstance(d, dict):
            raise ConfigError("top level must be an object")
        return cls.from_dict(d)


@dataclass
class SyntheticTruth:
    """Noisy series plus the latent trajectories that generated it."""

    series: RawSeries
    flow: np.ndarray
    salt_resistance: np.ndarray
    reservoir_pressure: np.ndarray
    thp: np.ndarray
    temperature: np.ndarray
    producing: np.ndarray
    washes: np.ndarray
    scenario: WellScenario

    def write_sidecar(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "flow_latent", "thp_latent", "temperature_latent",
                        "reservoir_pressure", "salt_resistance", "producing"])
            for i, ts in enumerate(self.series.timestamps):
                w.writerow([format_timestamp(ts), repr(float(self.flow[i])), repr(float(self.thp[i])),
                            repr(float(self.temperature[i])), repr(float(self.reservoir_pressure[i])),
                            repr(float(self.salt_resistance[i])), int(self.producing[i])])


def _latent(sc: WellScenario):
    n = sc.duration
    choke = np.empty(n)
    starts = [s for s, _ in sc.choke_schedule] + [n]
    first = sc.choke_schedule[0][1]
    choke[: starts[0]] = first
    for (s, v), e in zip(sc.choke_schedule, starts[1:]):
        choke[s:e] = v
    shut = np.zeros(n, dtype=bool)
    wash = np.zeros(n, dtype=bool)
    for s, length in sc.shutin_schedule:
        shut[s : s + length] = True
        wash[s] = True
    choke[shut] = 0.0
    producing = choke > 0

    t_days = np.arange(n) * DT_DAYS
    p_res = sc.reservoir_pressure0 * np.exp(-sc.decline_rate * t_days)
    flow = np.zeros(n)
    thp = np.empty(n)
    salt = np.empty(n)
    temp = np.empty(n)
    build = 1.0 - math.exp(-1.0 / sc.buildup_steps) if sc.buildup_steps > 0 else 1.0
    relax = 1.0 - math.exp(-1.0 / sc.temperature_steps) if sc.temperature_steps > 0 else 1.0
    flow_ref = sc.productivity * sc.reservoir_pressure0
    s = 0.0
    p_t = p_res[0] * (1.0 - sc.thp_drawdown * choke[0])
    tmp = sc.temperature_ambient
    since_open = 0
    for i in range(n):
        if wash[i]:
            s *= 1.0 - sc.wash_reset_fraction
        if producing[i]:
            c = choke[i]
            p_t = p_res[i] * (1.0 - sc.thp_drawdown * c)
            flush = 1.0 + sc.flush_amplitude * (
                math.exp(-since_open / sc.flush_steps) if sc.flush_steps > 0 else 0.0
            )
            flow[i] = sc.productivity * c * math.sqrt(max(p_res[i] ** 2 - p_t**2, 0.0)) / (1.0 + s) * flush
            s += sc.salt_growth_rate * DT_DAYS
            since_open += 1
        else:
            p_t += (p_res[i] - p_t) * build
            since_open = 0
        thp[i] = p_t
        salt[i] = s
        target = sc.temperature_ambient + sc.temperature_rise * flow[i] / flow_ref
        tmp += (target - tmp) * relax
        temp[i] = tmp
    return choke, producing, wash, p_res, flow, thp, salt, temp


def simulate_well(scenario: WellScenario) -> SyntheticTruth:
    """Deterministic (given ``scenario.seed``) synthetic well record.

    ``bias_offset`` shifts the latent flow of every producing step by
    ``bias_offset`` times the latent flow range of the unshifted well, so in
    units normalized on the unshifted well the flow moves by about
    ``bias_offset``.  Shifted flow is floored at zero.
    """
    sc = scenario
    choke, producing, wash, p_res, flow, thp, salt, temp = _latent(sc)
    if sc.bias_offset != 0.0:
        scale = float(flow.max() - flow.min())
        flow = np.where(producing, np.maximum(flow + sc.bias_offset * scale, 0.0), 0.0)

    rng = substream(sc.seed, "data-noise")
    n = sc.duration
    nz = sc.noise
    meas_flow = flow + rng.normal(0.0, 1.0, n) * nz["flow_rate"] * producing
    meas_flow = np.maximum(meas_flow, 0.0)
    meas_thp = thp[:, None] + rng.normal(0.0, 1.0, (n, 3)) * nz["thp"]
    meas_temp = temp + rng.normal(0.0, 1.0, n) * nz["temperature"]
    values = np.column_stack([meas_flow, meas_thp, meas_temp, choke])
    t0 = parse_timestamp(sc.start_time)
    ts = t0 + np.arange(n) * STEP
    series = RawSeries(ts, values)
    return SyntheticTruth(series, flow, salt, p_res, thp, temp, producing, wash, sc)


def derive_sibling(truth: SyntheticTruth, bias_offset: float, seed: int) -> SyntheticTruth:
    """Re-simulate ``truth``'s schedules with a flow offset and a fresh noise seed."""
    return simulate_well(replace(truth.scenario, bias_offset=float(bias_offset), seed=int(seed)))


def periodic_scenario(days, seed=0, shutin_every=(4.0, 8.0), shutin_hours=(2.0, 12.0),
                      choke_levels=(0.35, 0.9), choke_every=(0.5, 3.0), **overrides) -> WellScenario:
    """Scenario with randomized but reproducible shut-in and choke schedules.

    Shut-ins start every ``shutin_every`` days (uniform range) and last
    ``shutin_hours``; the choke jumps to a uniform level in ``choke_levels``
    every ``choke_every`` days.
    """
    rng = substream(seed, "schedule")
    n = int(round(days * STEPS_PER_DAY))
    shut = []
    t = int(rng.uniform(*shutin_every) * STEPS_PER_DAY)
    while True:
        length = max(1, int(rng.uniform(*shutin_hours) * 6))
        if t + length > n:
            break
        shut.append((t, length))
        t += length + int(rng.uniform(*shutin_every) * STEPS_PER_DAY)
    chk = []
    t = 0
    while t < n:
        chk.append((t, round(float(rng.uniform(*choke_levels)), 3)))
        t += max(1, int(rng.uniform(*choke_every) * STEPS_PER_DAY))
    return WellScenario(duration=n, shutin_schedule=tuple(shut), choke_schedule=tuple(chk), seed=seed,
                        **overrides)


FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    """Shipped scenario by name: ``"default"`` (about 4.3 years) or ``"ci"`` (30 days)."""
    return WellScenario.load(FIXTURES / f"{name}_scenario.json")
