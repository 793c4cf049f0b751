import json
from dataclasses import replace

import numpy as np
import pytest

from wellcast.errors import ConfigError
from wellcast.simulator import (STEPS_PER_DAY, WellScenario, derive_sibling, load_fixture, periodic_scenario,
                                simulate_well)
from wellcast.timeseries import fit_normalizer, load_series, write_series


@pytest.fixture(scope="module")
def truth():
    return simulate_well(periodic_scenario(40, seed=3))


class TestScenario:
    def test_roundtrip(self, tmp_path):
        sc = periodic_scenario(10, seed=1)
        sc.save(tmp_path / "s.json")
        assert WellScenario.load(tmp_path / "s.json") == sc

    @pytest.mark.parametrize("change,field", [
        ({"decline_rate": -1.0}, "decline_rate"),
        ({"wash_reset_fraction": 1.5}, "wash_reset_fraction"),
        ({"shutin_schedule": ((90, 20),)}, "shutin_schedule"),
        ({"shutin_schedule": ((10, 5), (12, 5))}, "shutin_schedule"),
        ({"choke_schedule": ((0, 1.2),)}, "choke_schedule"),
        ({"choke_schedule": ((5, 0.3), (5, 0.4))}, "choke_schedule"),
        ({"noise": {"flow_rate": 1.0}}, "noise"),
    ])
    def test_invalid(self, change, field):
        with pytest.raises(ConfigError) as info:
            WellScenario(duration=100, **change)
        assert info.value.field == field

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="colour"):
            WellScenario.from_dict({"duration": 10, "colour": "red"})

    def test_malformed_json_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "duration": 10,\n "seed": ,\n}\n')
        with pytest.raises(ConfigError, match="line 3"):
            WellScenario.load(p)

    def test_fixtures(self):
        ci = load_fixture("ci")
        assert ci.duration == 30 * STEPS_PER_DAY
        default = load_fixture("default")
        eval_rows = 2 * (2016 + 36)
        assert default.duration - eval_rows >= 3 * 365 * STEPS_PER_DAY


class TestSimulate:
    def test_closed_valve(self):
        t = simulate_well(WellScenario(duration=300, choke_schedule=((0, 0.0),)))
        assert np.all(t.flow == 0) and np.all(t.series.flow == 0)

    def test_stationary(self):
        sc = WellScenario(duration=500, decline_rate=0.0, salt_growth_rate=0.0, choke_schedule=((0, 0.5),),
                          noise={"flow_rate": 0.0, "thp": 0.0, "temperature": 0.0}, flush_amplitude=0.0)
        t = simulate_well(sc)
        assert np.all(t.flow == t.flow[0]) and t.flow[0] > 0
        np.testing.assert_array_equal(t.series.flow, t.flow)

    def test_degradation_between_washes(self):
        sc = WellScenario(duration=30 * STEPS_PER_DAY, choke_schedule=((0, 0.6),),
                          shutin_schedule=tuple((k * 5 * STEPS_PER_DAY, 24) for k in range(1, 6)))
        t = simulate_well(sc)
        bounds = [0] + [s + n for s, n in sc.shutin_schedule]
        for (start, _), first in zip(sc.shutin_schedule, bounds):
            assert t.flow[start - 1] < t.flow[first]

    def test_reproducible(self):
        sc = periodic_scenario(5, seed=4)
        a, b = simulate_well(sc), simulate_well(sc)
        np.testing.assert_array_equal(a.series.values, b.series.values)
        c = simulate_well(replace(sc, seed=5))
        assert not np.array_equal(a.series.values, c.series.values)

    def test_shutins_zero_and_production_positive(self, truth):
        shut = np.zeros(truth.scenario.duration, dtype=bool)
        for s, n in truth.scenario.shutin_schedule:
            shut[s:s + n] = True
        assert shut.any()
        assert np.all(truth.flow[shut] == 0) and np.all(truth.series.flow[shut] == 0)
        prod = ~shut & (truth.series.choke > 0) & (truth.reservoir_pressure > truth.thp)
        assert np.all(truth.flow[prod] > 0)
        assert np.all(truth.flow >= 0)

    def test_salt_dynamics(self, truth):
        f = truth.scenario.wash_reset_fraction
        s = truth.salt_resistance
        for i in range(1, s.size):
            if truth.washes[i]:
                assert s[i] == pytest.approx(s[i - 1] * (1 - f), rel=1e-12)
            else:
                assert s[i] >= s[i - 1]

    def test_noise_zero_mean(self, truth):
        n = truth.scenario.duration
        nz = truth.scenario.noise
        v = truth.series.values
        prod = truth.producing & (truth.flow > 5 * nz["flow_rate"])
        d = v[prod, 0] - truth.flow[prod]
        assert abs(d.mean()) < 5 * nz["flow_rate"] / np.sqrt(prod.sum())
        for k in (1, 2, 3):
            assert abs((v[:, k] - truth.thp).mean()) < 5 * nz["thp"] / np.sqrt(n)
        assert abs((v[:, 4] - truth.temperature).mean()) < 5 * nz["temperature"] / np.sqrt(n)

    def test_csv_roundtrip(self, tmp_path, truth):
        write_series(truth.series, tmp_path / "a.csv")
        back = load_series(tmp_path / "a.csv")
        np.testing.assert_array_equal(back.values, truth.series.values)
        truth.write_sidecar(tmp_path / "a.truth.csv")
        lines = (tmp_path / "a.truth.csv").read_text().splitlines()
        assert lines[0].startswith("timestamp,flow_latent") and len(lines) == len(truth.series) + 1


class TestSibling:
    def test_zero_offset_same_seed(self, truth):
        b = derive_sibling(truth, 0.0, truth.scenario.seed)
        np.testing.assert_array_equal(b.series.values, truth.series.values)

    def test_gap(self, truth):
        norm = fit_normalizer(truth.series)
        b = derive_sibling(truth, 0.05, seed=99)
        prod = truth.producing
        gap = (b.flow[prod] - truth.flow[prod]) / norm.range[0]
        assert 0.03 <= gap.mean() <= 0.07
        assert np.all(b.flow[~prod] == 0) and np.all(b.series.flow[~prod] == 0)

    def test_fresh_noise(self, truth):
        b = derive_sibling(truth, 0.0, seed=truth.scenario.seed + 1)
        assert not np.array_equal(b.series.values[:, 1], truth.series.values[:, 1])
        np.testing.assert_array_equal(b.flow, truth.flow)


def test_fixture_json_is_versioned():
    from wellcast.simulator import FIXTURES

    d = json.loads((FIXTURES / "default_scenario.json").read_text())
    assert d["schema_version"] == 1
