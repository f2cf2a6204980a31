import math
import struct

import pytest

from probekit.model import Capability, PluginKind
from probekit.plugins import (
    CapabilityDenied,
    EventBus,
    OptionError,
    Reporter,
    UnknownPlugin,
    describe_all,
    instantiate,
    poll,
    subscribe,
    unsubscribe,
)
from probekit.plugins.bus import ActivityTrace, DirectoryWatcher

SHIPPED = ["synth_sensor", "sys_cpu", "sys_mem", "net_traffic", "proc_list",
           "fs_events", "clock_events", "activity_state"]
ALL = frozenset(Capability)


class Sink:
    def __init__(self):
        self.items = []

    def __call__(self, plugin_id, payload=None, blob=None):
        self.items.append((plugin_id, payload, blob))


def reporter(sink=None, granted=ALL, gate=None):
    return Reporter(sink or Sink(), granted, gate)


def expected_synth(seed, amp, freq, t, decimals):
    # independent restatement: two LCG steps over (seed xor t*golden) mod 2^64
    mask = (1 << 64) - 1
    s = (seed ^ (t * 0x9E3779B97F4A7C15)) & mask
    s = (s * 6364136223846793005 + 1442695040888963407) & mask
    s = (s * 6364136223846793005 + 1442695040888963407) & mask
    u = (s >> 11) * 2.0 ** -53
    return round(amp * math.sin(2 * math.pi * freq * t / 1000) + 0.01 * amp * (2 * u - 1), decimals)


def test_describe_all_ids_and_order():
    ids = [d.plugin_id for d in describe_all()]
    assert sorted(ids) == sorted(SHIPPED) and len(ids) == 8
    assert ids == [d.plugin_id for d in describe_all()]
    assert all(d.required_capabilities for d in describe_all())
    assert all((d.default_interval_ms is not None) == (d.kind is PluginKind.POLLING) for d in describe_all())


def test_option_defaults_satisfy_bounds():
    for d in describe_all():
        for spec in d.option_schema:
            assert spec.check(spec.default) is None, (d.plugin_id, spec.name)


def test_instantiate_fills_defaults():
    inst = instantiate("synth_sensor", {"seed": 7}, reporter())
    assert inst.resolved_options["seed"] == 7
    assert inst.resolved_options["amplitude"] == 1.0 and inst.resolved_options["frequency_hz"] == 1.0


def test_instantiate_unknown_and_bad_options():
    with pytest.raises(UnknownPlugin):
        instantiate("nope", {}, reporter())
    with pytest.raises(OptionError):
        instantiate("synth_sensor", {"seed": -1}, reporter())
    with pytest.raises(OptionError):
        instantiate("synth_sensor", {"bogus": 1}, reporter())
    with pytest.raises(OptionError):
        instantiate("synth_sensor", {"amplitude": "loud"}, reporter())


def test_instantiate_without_capability_is_denied():
    with pytest.raises(CapabilityDenied):
        instantiate("sys_cpu", {}, reporter(granted=frozenset({Capability.SYS_MEM})))


def test_reporter_refuses_ungranted_emission():
    sink = Sink()
    inst = instantiate("synth_sensor", {}, reporter(sink))
    narrow = Reporter(sink, frozenset({Capability.SYS_MEM}))
    with pytest.raises(CapabilityDenied):
        narrow.emit(inst.descriptor, {"value": 1})
    assert sink.items == []


@pytest.mark.parametrize("seed, amp, freq", [(0, 1.0, 1.0), (7, 3.5, 0.25), (12345, 100.0, 7.0)])
def test_synth_matches_formula(seed, amp, freq):
    inst = instantiate("synth_sensor", {"seed": seed, "amplitude": amp, "frequency_hz": freq, "decimals": 6},
                       reporter())
    for t in (1, 250, 1_700_000_000_123, 1_700_000_987_654):
        assert poll(inst, t) == [{"value": expected_synth(seed, amp, freq, t, 6)}]


def test_synth_noise_bounded_and_deterministic():
    a = instantiate("synth_sensor", {"seed": 3, "amplitude": 2.0, "decimals": 15}, reporter())
    b = instantiate("synth_sensor", {"seed": 3, "amplitude": 2.0, "decimals": 15}, reporter())
    ts = range(1_700_000_000_000, 1_700_000_000_000 + 5000, 50)
    assert [poll(a, t) for t in ts] == [poll(b, t) for t in ts]
    for t in ts:
        clean = 2.0 * math.sin(2 * math.pi * t / 1000)
        assert abs(poll(a, t)[0]["value"] - clean) <= 0.02 + 1e-12


def test_synth_raw_blob():
    inst = instantiate("synth_sensor", {"output": "raw", "raw_samples": 16}, reporter())
    (blob,) = poll(inst, 1000)
    assert isinstance(blob, bytes) and len(blob) == 64
    assert struct.unpack("<16f", blob)[0] == pytest.approx(inst.reading(1000), abs=1e-6)


def test_sys_mem_ordering():
    (p,) = poll(instantiate("sys_mem", {}, reporter()), 1)
    assert p["total_bytes"] >= p["used_bytes"] >= 0


def test_net_traffic_monotone():
    inst = instantiate("net_traffic", {}, reporter())
    (a,), (b,) = poll(inst, 1), poll(inst, 2)
    for k in ("bytes_sent", "bytes_recv", "packets_sent", "packets_recv"):
        assert b[k] >= a[k]


def test_sys_cpu_and_proc_list_payloads():
    (cpu,) = poll(instantiate("sys_cpu", {"per_cpu": True}, reporter()), 1)
    assert 0 <= cpu["percent"] <= 100 and isinstance(cpu["per_cpu"], list)
    (procs,) = poll(instantiate("proc_list", {"max_entries": 3}, reporter()), 1)
    assert procs["count"] >= 1 and len(procs["processes"]) <= 3


def test_source_unavailable_is_a_record(monkeypatch):
    import probekit.plugins.collectors as col

    def broken():
        raise PermissionError("denied")

    monkeypatch.setattr(col.psutil, "virtual_memory", broken)
    (p,) = poll(instantiate("sys_mem", {}, reporter()), 1)
    assert p["error"] == "source_unavailable" and "denied" in p["detail"]


def test_poll_on_event_plugin_is_an_error():
    with pytest.raises(Exception):
        poll(instantiate("clock_events", {"watch_host": False}, reporter()), 1)


def test_clock_event_subscription():
    sink, bus = Sink(), EventBus()
    inst = instantiate("clock_events", {"watch_host": False}, reporter(sink))
    subscribe(inst, bus)
    subscribe(inst, bus)  # idempotent
    bus.publish("clock", {"kind": "timezone_changed", "old_zone": "UTC", "new_zone": "Europe/Rome"})
    assert sink.items == [("clock_events", {"event": "timezone_changed", "old_zone": "UTC",
                                            "new_zone": "Europe/Rome"}, None)]
    unsubscribe(inst)
    bus.publish("clock", {"kind": "time_set"})
    assert len(sink.items) == 1


def test_no_events_no_records():
    sink, bus = Sink(), EventBus()
    for pid, opts in (("clock_events", {"watch_host": False}), ("activity_state", {})):
        subscribe(instantiate(pid, opts, reporter(sink)), bus)
    for t in range(0, 10_000, 100):
        bus.pump(t)
    assert sink.items == []


def test_fs_events_observes_touch(tmp_path):
    watch = tmp_path / "watch"
    watch.mkdir()
    sink, bus = Sink(), EventBus()
    inst = instantiate("fs_events", {"path": str(watch)}, reporter(sink))
    subscribe(inst, bus)
    (watch / "new.txt").write_text("hello")
    bus.pump(1)
    assert len(sink.items) == 1
    _, payload, _ = sink.items[0]
    assert payload["action"] == "created" and payload["path"].endswith("new.txt") and payload["size"] == 5
    bus.pump(2)
    assert len(sink.items) == 1
    unsubscribe(inst)
    (watch / "other.txt").write_text("x")
    bus.pump(3)
    assert len(sink.items) == 1


def test_directory_watcher_actions(tmp_path):
    bus, seen = EventBus(), []
    bus.subscribe("fs", seen.append)
    w = DirectoryWatcher(tmp_path)
    f = tmp_path / "a"
    f.write_text("1")
    w.check(bus, 1)
    f.write_text("22")
    w.check(bus, 2)
    f.unlink()
    w.check(bus, 3)
    assert [e["action"] for e in seen] == ["created", "modified", "deleted"]


def test_activity_trace(tmp_path):
    trace = tmp_path / "trace.txt"
    trace.write_text("# ts state\n1000 idle\n2000 active\n")
    t = ActivityTrace.from_file(trace)
    assert t.is_active(500) and not t.is_active(1500) and t.is_active(2500)
    sink, bus = Sink(), EventBus()
    subscribe(instantiate("activity_state", {"trace_file": str(trace)}, reporter(sink)), bus)
    for now in (500, 1500, 1600, 2500):
        bus.pump(now)
    assert [p["state"] for _, p, _ in sink.items] == ["idle", "active"]


def test_gate_suppresses_emission():
    sink, bus = Sink(), EventBus()
    subscribe(instantiate("clock_events", {"watch_host": False}, reporter(sink, gate=lambda: False)), bus)
    bus.publish("clock", {"kind": "time_set"})
    assert sink.items == []
