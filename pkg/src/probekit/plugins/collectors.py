"""Built-in collector plugins.

Payload fields per plugin:

synth_sensor   {"value": float}; with output="raw" a blob of little-endian
               float32 samples instead
sys_cpu        {"percent", "user_s", "system_s", "idle_s"} (+ "per_cpu" list)
sys_mem        {"total_bytes", "used_bytes", "available_bytes"} (+ swap_*)
net_traffic    {"bytes_sent", "bytes_recv", "packets_sent", "packets_recv"}
               or {"nics": {name: {...}}} when per_interface is set
proc_list      {"count", "processes": [{"pid", "name"}, ...]}
fs_events      {"action", "path", "size"?}
clock_events   {"event", ...event fields} e.g. old_zone/new_zone
activity_state {"state": "active"|"idle"}

Unreadable host counters yield {"error": "source_unavailable", "detail": ...}.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Any, Mapping, Optional

from probekit.plugins.base import PluginInstance
from probekit.plugins.bus import ActivityTrace, ClockWatcher, DirectoryWatcher

try:
    import psutil
except ImportError:  # pragma: no cover - psutil is a declared dependency
    psutil = None

_M64 = 1 << 64
_LCG_A = 6364136223846793005
_LCG_C = 1442695040888963407
_GOLDEN = 0x9E3779B97F4A7C15


def lcg_unit(seed: int, t_ms: int) -> float:
    """Deterministic uniform value in [0, 1) keyed by (seed, timestamp)."""
    state = (seed ^ (t_ms * _GOLDEN)) % _M64
    for _ in range(2):
        state = (state * _LCG_A + _LCG_C) % _M64
    return (state >> 11) / float(1 << 53)


def source_unavailable(exc: BaseException) -> dict:
    return {"error": "source_unavailable", "detail": f"{type(exc).__name__}: {exc}"}


class SynthSensor(PluginInstance):
    def reading(self, now_ms: int) -> float:
        o = self.resolved_options
        amp, freq = float(o["amplitude"]), float(o["frequency_hz"])
        noise = 0.01 * amp * (2.0 * lcg_unit(int(o["seed"]), now_ms) - 1.0)
        return amp * math.sin(2.0 * math.pi * freq * now_ms / 1000.0) + noise

    def poll(self, now_ms: int) -> list[Any]:
        o = self.resolved_options
        if o["output"] == "raw":
            n = int(o["raw_samples"])
            step = max(1, int(o["raw_spacing_ms"]))
            samples = [self.reading(now_ms + k * step) for k in range(n)]
            return [struct.pack(f"<{n}f", *samples)]
        return [{"value": round(self.reading(now_ms), int(o["decimals"]))}]


class SysCpu(PluginInstance):
    def poll(self, now_ms: int) -> list[Any]:
        try:
            times = psutil.cpu_times()
            out = {
                "percent": psutil.cpu_percent(interval=None),
                "user_s": times.user,
                "system_s": times.system,
                "idle_s": times.idle,
            }
            if self.resolved_options["per_cpu"]:
                out["per_cpu"] = psutil.cpu_percent(interval=None, percpu=True)
            return [out]
        except Exception as exc:
            return [source_unavailable(exc)]


class SysMem(PluginInstance):
    def poll(self, now_ms: int) -> list[Any]:
        try:
            vm = psutil.virtual_memory()
            out = {
                "total_bytes": vm.total,
                "used_bytes": min(vm.used, vm.total),
                "available_bytes": vm.available,
            }
            if self.resolved_options["include_swap"]:
                sw = psutil.swap_memory()
                out.update(swap_total_bytes=sw.total, swap_used_bytes=sw.used)
            return [out]
        except Exception as exc:
            return [source_unavailable(exc)]


def _nic_counters(c) -> dict:
    return {
        "bytes_sent": c.bytes_sent,
        "bytes_recv": c.bytes_recv,
        "packets_sent": c.packets_sent,
        "packets_recv": c.packets_recv,
    }


class NetTraffic(PluginInstance):
    def poll(self, now_ms: int) -> list[Any]:
        try:
            if self.resolved_options["per_interface"]:
                nics = psutil.net_io_counters(pernic=True)
                return [{"nics": {name: _nic_counters(c) for name, c in sorted(nics.items())}}]
            total = psutil.net_io_counters()
            if total is None:
                raise OSError("no network counters")
            return [_nic_counters(total)]
        except Exception as exc:
            return [source_unavailable(exc)]


class ProcList(PluginInstance):
    def poll(self, now_ms: int) -> list[Any]:
        try:
            procs = []
            for p in psutil.process_iter(["pid", "name"]):
                procs.append({"pid": p.info["pid"], "name": p.info["name"] or ""})
            procs.sort(key=lambda p: p["pid"])
            limit = int(self.resolved_options["max_entries"])
            return [{"count": len(procs), "processes": procs[:limit]}]
        except Exception as exc:
            return [source_unavailable(exc)]


class FsEvents(PluginInstance):
    topic = "fs"

    def __init__(self, descriptor, options, reporter):
        super().__init__(descriptor, options, reporter)
        self.root = str(Path(self.resolved_options["path"]))
        self._source_token: Optional[int] = None

    def attach(self, bus) -> None:
        if self._source_token is None:
            self._source_token = bus.add_source(
                DirectoryWatcher(self.root, recursive=bool(self.resolved_options["recursive"]))
            )

    def detach(self, bus) -> None:
        if self._source_token is not None:
            bus.remove_source(self._source_token)
            self._source_token = None

    def on_event(self, event: Mapping[str, Any]) -> Optional[dict]:
        if event.get("root") != self.root:
            return None
        out = {"action": event["action"], "path": event["path"]}
        if "size" in event:
            out["size"] = event["size"]
        return out


class ClockEvents(PluginInstance):
    topic = "clock"

    def __init__(self, descriptor, options, reporter):
        super().__init__(descriptor, options, reporter)
        self._source_token: Optional[int] = None

    def attach(self, bus) -> None:
        if self.resolved_options["watch_host"] and self._source_token is None:
            self._source_token = bus.add_source(ClockWatcher())

    def detach(self, bus) -> None:
        if self._source_token is not None:
            bus.remove_source(self._source_token)
            self._source_token = None

    def on_event(self, event: Mapping[str, Any]) -> Optional[dict]:
        out = {"event": event.get("kind", "unknown")}
        out.update({k: v for k, v in event.items() if k != "kind"})
        return out


class ActivityState(PluginInstance):
    topic = "activity"

    def __init__(self, descriptor, options, reporter):
        super().__init__(descriptor, options, reporter)
        self._source_token: Optional[int] = None

    def attach(self, bus) -> None:
        trace = self.resolved_options["trace_file"]
        if trace and self._source_token is None:
            self._source_token = bus.add_source(ActivityTrace.from_file(trace))

    def detach(self, bus) -> None:
        if self._source_token is not None:
            bus.remove_source(self._source_token)
            self._source_token = None

    def on_event(self, event: Mapping[str, Any]) -> Optional[dict]:
        state = event.get("state")
        if state not in ("active", "idle"):
            return None
        return {"state": state}
