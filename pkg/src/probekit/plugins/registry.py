"""The compiled-in plugin registry and the generic plugin operations."""

from __future__ import annotations

from typing import Any, Mapping, Optional

from probekit.model import Capability, PluginKind
from probekit.plugins import collectors as c
from probekit.plugins.base import (
    OptionSpec,
    PluginDescriptor,
    PluginError,
    PluginInstance,
    Reporter,
    UnknownPlugin,
)

_AUTHOR = "probekit"

_REGISTRY: tuple[PluginDescriptor, ...] = (
    PluginDescriptor(
        "synth_sensor", PluginKind.POLLING, _AUTHOR,
        "Deterministic synthetic sensor: seeded sine wave with +/-1% noise.",
        frozenset({Capability.SENSOR_SYNTH}),
        (
            OptionSpec("seed", "integer", 0, min=0),
            OptionSpec("amplitude", "decimal", 1.0, min=0.0),
            OptionSpec("frequency_hz", "decimal", 1.0, min=0.0, max=1000.0),
            OptionSpec("decimals", "integer", 2, min=0, max=15),
            OptionSpec("output", "text", "value", allowed_values=frozenset({"value", "raw"})),
            OptionSpec("raw_samples", "integer", 64, min=1, max=1 << 20),
            OptionSpec("raw_spacing_ms", "integer", 1, min=1),
        ),
        default_interval_ms=100, factory=c.SynthSensor,
    ),
    PluginDescriptor(
        "sys_cpu", PluginKind.POLLING, _AUTHOR,
        "Host CPU utilisation and cumulative CPU times.",
        frozenset({Capability.SYS_CPU}),
        (OptionSpec("per_cpu", "boolean", False),),
        default_interval_ms=1000, factory=c.SysCpu,
    ),
    PluginDescriptor(
        "sys_mem", PluginKind.POLLING, _AUTHOR,
        "Host memory totals.",
        frozenset({Capability.SYS_MEM}),
        (OptionSpec("include_swap", "boolean", False),),
        default_interval_ms=1000, factory=c.SysMem,
    ),
    PluginDescriptor(
        "net_traffic", PluginKind.POLLING, _AUTHOR,
        "Cumulative network byte and packet counters.",
        frozenset({Capability.NET_TRAFFIC}),
        (OptionSpec("per_interface", "boolean", False),),
        default_interval_ms=1000, factory=c.NetTraffic,
    ),
    PluginDescriptor(
        "proc_list", PluginKind.POLLING, _AUTHOR,
        "Running process list (pid, name).",
        frozenset({Capability.PROC_LIST}),
        (OptionSpec("max_entries", "integer", 50, min=0),),
        default_interval_ms=60_000, factory=c.ProcList,
    ),
    PluginDescriptor(
        "fs_events", PluginKind.EVENT, _AUTHOR,
        "File created/modified/deleted events under a directory.",
        frozenset({Capability.FS_EVENTS}),
        (
            OptionSpec("path", "text", "."),
            OptionSpec("recursive", "boolean", True),
        ),
        factory=c.FsEvents,
    ),
    PluginDescriptor(
        "clock_events", PluginKind.EVENT, _AUTHOR,
        "Timezone changes and wall-clock adjustments.",
        frozenset({Capability.CLOCK_EVENTS}),
        (OptionSpec("watch_host", "boolean", True),),
        factory=c.ClockEvents,
    ),
    PluginDescriptor(
        "activity_state", PluginKind.EVENT, _AUTHOR,
        "User activity transitions (active/idle), optionally replayed from a trace file.",
        frozenset({Capability.ACTIVITY_STATE}),
        (OptionSpec("trace_file", "text", ""),),
        factory=c.ActivityState,
    ),
)


def describe_all() -> list[PluginDescriptor]:
    return list(_REGISTRY)


def get_descriptor(plugin_id: str, registry=None) -> PluginDescriptor:
    for d in registry if registry is not None else _REGISTRY:
        if d.plugin_id == plugin_id:
            return d
    raise UnknownPlugin(plugin_id)


def instantiate(plugin_id: str, options: Optional[Mapping[str, Any]] = None,
                reporter: Optional[Reporter] = None, registry=None) -> PluginInstance:
    desc = get_descriptor(plugin_id, registry)
    resolved = desc.resolve_options(options or {})
    if reporter is not None:
        reporter.check(desc)
    return desc.factory(desc, resolved, reporter)


def poll(instance: PluginInstance, now_ms: int) -> list[Any]:
    if instance.kind is not PluginKind.POLLING:
        raise PluginError(f"{instance.plugin_id} is an event plugin; it cannot be polled")
    return instance.poll(now_ms)


def subscribe(instance: PluginInstance, bus) -> None:
    if instance.kind is not PluginKind.EVENT:
        raise PluginError(f"{instance.plugin_id} is a polling plugin; it cannot subscribe")
    if instance._subscription is None:
        instance._subscription = bus.subscribe(instance.topic, instance._deliver)
        instance._bus = bus
    instance.attach(bus)


def unsubscribe(instance: PluginInstance) -> None:
    bus = getattr(instance, "_bus", None)
    if instance._subscription is not None and bus is not None:
        bus.unsubscribe(instance._subscription)
        instance.detach(bus)
    instance._subscription = None
