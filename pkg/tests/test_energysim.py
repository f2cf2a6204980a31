import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import event, make_manifest, polling
from probekit.energysim import (
    PLUGIN_COST,
    SCENARIOS,
    EnergyParams,
    PollLoad,
    Scenario,
    compare,
    default_params,
    main,
    simulate,
    single_plugin,
    sweep,
)
from probekit.model import COARSE_THRESHOLD_MS, GlobalWakePolicy

P = default_params()
POLLERS = sorted(PLUGIN_COST)


def avg(name, **kw):
    return simulate(name, **kw).avg_current_ma


def test_wakelock_delta_exact():
    assert avg("idle_wl") - avg("idle") == pytest.approx(P.awake_overhead_ma, abs=1e-9)
    assert avg("idle") == P.i_sleep_ma


def test_calibrated_ratios():
    base = avg("idle_wl")
    assert avg("a4") / base >= 2.0
    assert 1.05 <= avg("a3") / base <= 1.25


def test_event_only_matches_idle():
    assert abs(avg("events") - avg("idle")) / avg("idle") <= 0.01


def test_browsing_overheads_small():
    base = avg("idle_on")
    for name in ("b1", "b2", "b3", "b4"):
        assert base < avg(name) < 1.2 * base


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(POLLERS), st.integers(10, 100_000)), min_size=1, max_size=5),
       st.booleans())
def test_bounds(polls, wakelock):
    sc = Scenario("x", "", tuple(PollLoad(p, i, PLUGIN_COST[p]) for p, i in polls), wakelock=wakelock)
    r = simulate(sc, duration_ms=10 * 100_000)
    assert P.i_sleep_ma <= r.avg_current_ma <= P.high_ma + 1e-9
    assert 0 <= r.high_freq_fraction <= r.awake_fraction <= 1


@pytest.mark.parametrize("pid", POLLERS)
def test_sweep_monotone(pid):
    intervals = list(range(20, 200, 1)) + list(range(200, 5001, 25)) + [COARSE_THRESHOLD_MS, 20_000, 60_000]
    currents = [r.avg_current_ma for r in sweep(pid, intervals)]
    assert all(a >= b - 1e-12 for a, b in zip(currents, currents[1:]))


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(POLLERS), st.integers(10, 5000), st.sampled_from(POLLERS), st.integers(10, 5000))
def test_adding_a_plugin_never_lowers_current(p1, i1, p2, i2):
    one = Scenario("one", "", (PollLoad(p1, i1, PLUGIN_COST[p1]),))
    both = Scenario("both", "", one.polls + (PollLoad(p2, i2, PLUGIN_COST[p2]),))
    assert simulate(both, 100_000).avg_current_ma >= simulate(one, 100_000).avg_current_ma - 1e-12


def test_coarse_wakeups_counted():
    r = simulate(single_plugin("proc_list", 60_000), duration_ms=3_600_000)
    assert r.wakeup_count == 60 and r.awake_fraction < 0.05
    assert simulate("a1").wakeup_count == 0


def test_deterministic():
    assert [simulate(n) for n in SCENARIOS] == [simulate(n) for n in SCENARIOS]


def test_duration_too_short():
    with pytest.raises(ValueError):
        simulate(single_plugin("synth_sensor", 1000), duration_ms=9_999)
    simulate(single_plugin("synth_sensor", 1000), duration_ms=10_000)


def test_params_validation():
    with pytest.raises(ValueError):
        EnergyParams(i_sleep_ma=0)
    with pytest.raises(ValueError):
        EnergyParams.from_json({"bogus": 1})
    assert EnergyParams.from_json({"i_sleep_ma": 10}).i_sleep_ma == 10


def test_manifest_scenario(registry):
    m = make_manifest([polling("synth_sensor", 50), event("clock_events")], registry)
    assert simulate(m).avg_current_ma == pytest.approx(avg("a1"))
    coarse = make_manifest([polling("sys_mem", 20_000)], registry, wake=GlobalWakePolicy(False))
    assert simulate(coarse).awake_fraction < 1


def test_compare_ratios():
    c = compare(["idle_wl", "a3", "a4"])
    assert c.ratios[0] == 1.0 and [r["scenario"] for r in c.rows()] == ["idle_wl", "a3", "a4"]


def test_cli_report_dir(tmp_path, capsys):
    assert main(["--scenario", "idle_wl", "--scenario", "a4", "--report-dir", str(tmp_path / "cmp")]) == 0
    rows = list(csv.DictReader((tmp_path / "cmp" / "report.csv").open()))
    assert [r["scenario"] for r in rows] == ["idle_wl", "a4"]
    assert (tmp_path / "cmp" / "compare.png").stat().st_size > 0
    capsys.readouterr()
    assert main(["--sweep", "synth_sensor", "--intervals", "20,100,1000", "--json",
                 "--report-dir", str(tmp_path / "sw")]) == 0
    out = capsys.readouterr().out
    assert [r["interval_ms"] for r in json.loads(out)] == [20, 100, 1000]
    assert (tmp_path / "sw" / "sweep.png").exists()
    assert main(["--scenario", "nope"]) == 1


def test_scenario_ordering():
    assert avg("a4") >= avg("a1") >= avg("a3")


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(POLLERS), st.integers(10, 60_000), st.sampled_from(POLLERS), st.integers(10, 60_000))
def test_additivity_bound(p1, i1, p2, i2):
    d = 10 * max(i1, i2)
    base = simulate("idle", d).avg_current_ma
    one = simulate(Scenario("1", "", (PollLoad(p1, i1, PLUGIN_COST[p1]),)), d).avg_current_ma
    two = simulate(Scenario("2", "", (PollLoad(p2, i2, PLUGIN_COST[p2]),)), d).avg_current_ma
    both = simulate(Scenario("b", "", (PollLoad(p1, i1, PLUGIN_COST[p1]), PollLoad(p2, i2, PLUGIN_COST[p2]))),
                    d).avg_current_ma
    assert both <= base + (one - base) + (two - base) + 1e-9
