import threading
import time
import uuid

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import event, make_manifest, polling
from probekit.model import COARSE_THRESHOLD_MS, GlobalWakePolicy
from probekit.plugins import ActivityTrace, EventBus
from probekit.scheduler import (
    COARSE_TOLERANCE_MS,
    PRECISE_TOLERANCE_MS,
    RealClock,
    SimulatedClock,
    WakePolicyConflict,
    compute_wake_plan,
    load_run_state,
    start_experiment,
    status,
    stop_experiment,
)
from probekit.storage import Storage, StorageConfig


def storage_for(tmp_path, manifest, clock):
    return Storage(StorageConfig(tmp_path / "data"), manifest.experiment_id, str(uuid.uuid4()), clock)


def test_plan_event_only():
    plan = compute_wake_plan([event("fs_events")], GlobalWakePolicy())
    assert plan.event_plugins == ("fs_events",)
    assert plan.coarse_polling == () and plan.precise_polling == () and not plan.holds_wakelock


def test_plan_coarse():
    plan = compute_wake_plan([polling("proc_list", 60_000)], GlobalWakePolicy())
    assert plan.coarse_polling == (("proc_list", 60_000),) and not plan.holds_wakelock


def test_plan_precise():
    plan = compute_wake_plan([polling("synth_sensor", 50)], GlobalWakePolicy())
    assert plan.precise_polling == (("synth_sensor", 50),) and plan.holds_wakelock


def test_plan_threshold_boundary():
    plan = compute_wake_plan([polling("a", COARSE_THRESHOLD_MS), polling("b", COARSE_THRESHOLD_MS + 1)],
                             GlobalWakePolicy())
    assert plan.precise_polling == (("a", COARSE_THRESHOLD_MS),)
    assert plan.coarse_polling == (("b", COARSE_THRESHOLD_MS + 1),)


def test_plan_conflict():
    with pytest.raises(WakePolicyConflict):
        compute_wake_plan([polling("synth_sensor", 50)], GlobalWakePolicy(allow_wakelocks=False))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(10, 100_000)), min_size=1, max_size=10))
def test_plan_partition(intervals):
    configs = [event(f"e{i}") if iv is None else polling(f"p{i}", iv) for i, iv in enumerate(intervals)]
    plan = compute_wake_plan(configs, GlobalWakePolicy())
    ids = list(plan.event_plugins) + [p for p, _ in plan.coarse_polling + plan.precise_polling]
    assert sorted(ids) == sorted(c.plugin_id for c in configs)
    assert plan.holds_wakelock == bool(plan.precise_polling)


def test_start_stop_lifecycle(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 100)], registry)
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock, state_path=tmp_path / "run.json")
    assert status(run).running and run.wakelock_held
    assert load_run_state(tmp_path / "run.json").running
    final = stop_experiment(run)
    assert not final.running and not run.wakelock_held
    assert clock.pending() == 0
    assert stop_experiment(run) == final
    assert not load_run_state(tmp_path / "run.json").running


def test_precise_poll_count(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 100)], registry)
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock)
    assert status(run).plugins["synth_sensor"].polls_executed == 0
    clock.advance(500)
    assert status(run).plugins["synth_sensor"].polls_executed == 5
    clock.advance(500)
    assert abs(status(run).plugins["synth_sensor"].polls_executed - 10) <= 1
    run.stop()


@settings(max_examples=40, deadline=None)
@given(interval=st.integers(10, 5000), duration=st.integers(0, 60_000))
def test_poll_count_property(tmp_path_factory, registry, interval, duration):
    clk = SimulatedClock()
    m = make_manifest([polling("synth_sensor", interval)], registry)
    st_ = storage_for(tmp_path_factory.mktemp("p"), m, clk)
    run = start_experiment(m, registry, st_, clk)
    clk.advance(duration)
    final = run.stop()
    assert abs(final.plugins["synth_sensor"].polls_executed - duration // interval) <= 1
    assert sum(c.record_count for c in st_.list_chunks()) == final.records_emitted


def test_stop_conserves_records(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 50), polling("sys_mem", 100), event("clock_events", watch_host=False)],
                      registry)
    bus = EventBus()
    st_ = storage_for(tmp_path, m, clock)
    run = start_experiment(m, registry, st_, clock, bus=bus)
    for i in range(20):
        clock.advance(250)
        bus.publish("clock", {"kind": "time_set"})
    final = run.stop()
    assert final.plugins["clock_events"].records_emitted == 20
    assert sum(c.record_count for c in st_.list_chunks()) == final.records_emitted


def test_no_fire_after_stop(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 10)], registry)
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock)
    clock.advance(100)
    before = run.stop().plugins["synth_sensor"].polls_executed
    clock.advance(10_000)
    assert status(run).plugins["synth_sensor"].polls_executed == before


def test_active_only_all_idle(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 100), event("clock_events", watch_host=False)], registry,
                      wake=GlobalWakePolicy(True, True))
    bus = EventBus()
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock, bus=bus,
                           activity=ActivityTrace([], initial=False))
    clock.advance(5000)
    bus.publish("clock", {"kind": "time_set"})
    final = run.stop()
    assert final.plugins["synth_sensor"].polls_executed == 0 and final.records_emitted == 0


def test_active_only_partial(tmp_path, registry, clock):
    t0 = clock.now_ms()
    trace = ActivityTrace([(t0 + 1000, False), (t0 + 2000, True)], initial=True)
    m = make_manifest([polling("synth_sensor", 100)], registry, wake=GlobalWakePolicy(True, True))
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock, activity=trace)
    clock.advance(3000)
    polls = run.stop().plugins["synth_sensor"].polls_executed
    assert 19 <= polls <= 21


def test_missed_deadlines_recorded_not_compensated(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 100)], registry)
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock)
    clock.advance(300)
    clock.stall(1050)  # off-grid so the next slot is not due yet
    clock.advance(0)
    s = status(run).plugins["synth_sensor"]
    assert s.polls_executed == 4  # one late poll, no burst of catch-up polls
    assert s.missed_deadlines >= 9
    clock.advance(50)
    assert status(run).plugins["synth_sensor"].polls_executed == 5
    run.stop()


def test_coarse_never_early(tmp_path, registry, clock):
    interval = 20_000
    m = make_manifest([polling("sys_mem", interval)], registry)
    st_ = storage_for(tmp_path, m, clock)
    t0 = clock.now_ms()
    run = start_experiment(m, registry, st_, clock)
    clock.advance(200_000)
    run.stop()
    ts = [r.ts_ms for c in st_.list_chunks() for r in st_.read_chunk(c.chunk_id)[0]]
    assert len(ts) == 10
    for k, t in enumerate(ts, start=1):
        assert t >= t0 + k * interval - COARSE_TOLERANCE_MS


def test_counters_monotone(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 30), polling("sys_mem", 70)], registry)
    run = start_experiment(m, registry, storage_for(tmp_path, m, clock), clock)
    prev = status(run)
    for _ in range(20):
        clock.advance(113)
        cur = status(run)
        for pid, c in cur.plugins.items():
            p = prev.plugins[pid]
            assert c.polls_executed >= p.polls_executed and c.records_emitted >= p.records_emitted
        prev = cur
    run.stop()


def test_instantiation_failure_tears_down(tmp_path, registry, clock):
    m = make_manifest([event("clock_events", watch_host=False), polling("synth_sensor", 50, seed=-5)], registry)
    bus = EventBus()
    with pytest.raises(Exception):
        start_experiment(m, registry, storage_for(tmp_path, m, clock), clock, bus=bus)
    assert clock.pending() == 0
    assert bus.publish("clock", {"kind": "time_set"}) == 0


def test_resume_continues_chunk_seq(tmp_path, registry, clock):
    m = make_manifest([polling("synth_sensor", 100)], registry)
    dev = str(uuid.uuid4())
    cfg = StorageConfig(tmp_path / "data", chunk_max_age_ms=1000, cache_flush_interval_ms=100)
    st1 = Storage(cfg, m.experiment_id, dev, clock)
    run = start_experiment(m, registry, st1, clock, state_path=tmp_path / "run.json")
    clock.advance(3050)
    run.abandon()  # crash: nothing sealed or persisted beyond housekeeping
    prior = load_run_state(tmp_path / "run.json")
    st2 = Storage(cfg, m.experiment_id, dev, clock)
    run2 = start_experiment(m, registry, st2, clock, state_path=tmp_path / "run.json", resume=prior)
    clock.advance(3000)
    run2.stop()
    seqs = [c.chunk_seq for c in st2.list_chunks()]
    assert seqs == list(range(len(seqs))) and len(seqs) >= 5


def test_real_clock_precise_timer():
    clk = RealClock()
    fires, active, overlap = [], [0], []
    lock = threading.Lock()

    def cb(fire):
        with lock:
            active[0] += 1
            overlap.append(active[0] > 1)
        fires.append(fire)
        time.sleep(0.002)
        with lock:
            active[0] -= 1

    t = clk.schedule_periodic(20, cb, precise=True)
    time.sleep(0.5)
    t.cancel()
    clk.close()
    assert 15 <= len(fires) <= 26
    late = [f for f in fires if f.fired_ms - f.due_ms > PRECISE_TOLERANCE_MS]
    assert len(late) <= len(fires) // 4
    assert not any(overlap)
