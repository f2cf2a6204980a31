"""Experiment runner: wake planning, timers, event dispatch and run state.

Polling timers are aligned to experiment start: a plugin with interval ``i``
polls at ``start + i, start + 2i, ...``. Late timers are recorded as missed
deadlines and never caught up in a burst.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from probekit.fsutil import read_json, write_json
from probekit.model import (
    COARSE_THRESHOLD_MS,
    ExperimentManifest,
    GlobalWakePolicy,
    PluginConfig,
    PluginKind,
    validate_manifest,
)
from probekit.plugins import registry as plugin_registry
from probekit.plugins.base import Reporter
from probekit.plugins.collectors import source_unavailable
from probekit.storage import StorageError

logger = logging.getLogger(__name__)

PRECISE_TOLERANCE_MS = 5
COARSE_TOLERANCE_MS = 500


class SchedulerError(Exception):
    pass


class WakePolicyConflict(SchedulerError):
    pass


# ---------------------------------------------------------------- wake plan

@dataclass(frozen=True)
class WakePlan:
    event_plugins: tuple[str, ...]
    coarse_polling: tuple[tuple[str, int], ...]
    precise_polling: tuple[tuple[str, int], ...]
    holds_wakelock: bool


def compute_wake_plan(configs: list[PluginConfig], policy: GlobalWakePolicy,
                      threshold_ms: int = COARSE_THRESHOLD_MS) -> WakePlan:
    events, coarse, precise = [], [], []
    for c in configs:
        if c.kind is PluginKind.EVENT:
            events.append(c.plugin_id)
        elif c.interval_ms > threshold_ms:
            coarse.append((c.plugin_id, c.interval_ms))
        else:
            precise.append((c.plugin_id, c.interval_ms))
    if precise and not policy.allow_wakelocks:
        names = ", ".join(p for p, _ in precise)
        raise WakePolicyConflict(f"wakelocks disallowed but {names} need precise timers")
    return WakePlan(tuple(events), tuple(coarse), tuple(precise), bool(precise))


# ---------------------------------------------------------------- clocks

@dataclass(frozen=True)
class Fire:
    due_ms: int
    fired_ms: int
    skipped: int = 0


class Timer:
    def __init__(self, clock, interval_ms: int, callback: Callable[[Fire], None], precise: bool, due_ms: int):
        self.clock = clock
        self.interval_ms = interval_ms
        self.callback = callback
        self.precise = precise
        self.due_ms = due_ms
        self.active = True

    @property
    def tolerance_ms(self) -> int:
        return PRECISE_TOLERANCE_MS if self.precise else COARSE_TOLERANCE_MS

    def cancel(self) -> None:
        self.active = False

    def _advance(self, fired_ms: int) -> Fire:
        due = self.due_ms
        nxt = due + self.interval_ms
        skipped = 0
        while nxt + self.tolerance_ms < fired_ms:
            nxt += self.interval_ms
            skipped += 1
        self.due_ms = nxt
        return Fire(due, fired_ms, skipped)


class Clock:
    """Time source plus periodic timers. Callbacks receive a :class:`Fire`."""

    def now_ms(self) -> int:
        raise NotImplementedError

    def schedule_periodic(self, interval_ms: int, callback: Callable[[Fire], None], *,
                          precise: bool, start_ms: Optional[int] = None) -> Timer:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SimulatedClock(Clock):
    """Deterministic clock: time moves only through ``advance`` / ``stall``."""

    def __init__(self, start_ms: int = 1_700_000_000_000):
        self._now = start_ms
        self._heap: list = []
        self._order = itertools.count()
        self._lock = threading.RLock()

    def now_ms(self) -> int:
        return self._now

    def schedule_periodic(self, interval_ms, callback, *, precise, start_ms=None):
        base = self._now if start_ms is None else start_ms
        timer = Timer(self, interval_ms, callback, precise, base + interval_ms)
        with self._lock:
            heapq.heappush(self._heap, (timer.due_ms, next(self._order), timer))
        return timer

    def pending(self) -> int:
        return sum(1 for _, _, t in self._heap if t.active)

    def advance(self, ms: int) -> None:
        target = self._now + ms
        while True:
            with self._lock:
                while self._heap and not self._heap[0][2].active:
                    heapq.heappop(self._heap)
                if not self._heap or self._heap[0][0] > target:
                    break
                due, _, timer = heapq.heappop(self._heap)
                self._now = max(self._now, due)
                fire = timer._advance(self._now)
            timer.callback(fire)
            with self._lock:
                if timer.active:
                    heapq.heappush(self._heap, (timer.due_ms, next(self._order), timer))
        self._now = target

    def stall(self, ms: int) -> None:
        """Jump forward without firing, as if the host was frozen."""
        self._now += ms


class RealClock(Clock):
    """Wall-clock timers driven by one dispatcher thread (callbacks never overlap)."""

    def __init__(self):
        self._heap: list = []
        self._order = itertools.count()
        self._cond = threading.Condition()
        self._closed = False
        self._thread = threading.Thread(target=self._loop, name="probekit-clock", daemon=True)
        self._thread.start()

    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000

    def schedule_periodic(self, interval_ms, callback, *, precise, start_ms=None):
        base = self.now_ms() if start_ms is None else start_ms
        timer = Timer(self, interval_ms, callback, precise, base + interval_ms)
        with self._cond:
            heapq.heappush(self._heap, (timer.due_ms, next(self._order), timer))
            self._cond.notify()
        return timer

    def _loop(self) -> None:
        while True:
            with self._cond:
                while True:
                    if self._closed:
                        return
                    while self._heap and not self._heap[0][2].active:
                        heapq.heappop(self._heap)
                    if self._heap:
                        wait = (self._heap[0][0] - self.now_ms()) / 1000.0
                        if wait <= 0:
                            break
                        self._cond.wait(wait)
                    else:
                        self._cond.wait()
                _, _, timer = heapq.heappop(self._heap)
                fire = timer._advance(self.now_ms())
            try:
                timer.callback(fire)
            except Exception:
                logger.exception("timer callback failed")
            with self._cond:
                if timer.active:
                    heapq.heappush(self._heap, (timer.due_ms, next(self._order), timer))

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=5)


# ---------------------------------------------------------------- run state

@dataclass
class PluginCounters:
    records_emitted: int = 0
    polls_executed: int = 0
    last_poll_ts: Optional[int] = None
    missed_deadlines: int = 0


@dataclass
class RunState:
    experiment_id: str
    started_ts: int
    plugins: dict[str, PluginCounters] = field(default_factory=dict)
    running: bool = False
    error: Optional[str] = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunState":
        return cls(
            experiment_id=obj["experiment_id"],
            started_ts=obj["started_ts"],
            plugins={k: PluginCounters(**v) for k, v in obj.get("plugins", {}).items()},
            running=obj.get("running", False),
            error=obj.get("error"),
        )

    def copy(self) -> "RunState":
        return RunState.from_json(self.to_json())

    @property
    def records_emitted(self) -> int:
        return sum(c.records_emitted for c in self.plugins.values())


def load_run_state(path) -> Optional[RunState]:
    obj = read_json(path)
    return RunState.from_json(obj) if obj else None


# ---------------------------------------------------------------- run

class Run:
    """A running experiment. Create through :func:`start_experiment`."""

    def __init__(self, manifest: ExperimentManifest, registry, storage, clock: Clock,
                 bus=None, activity=None, state_path=None,
                 threshold_ms: int = COARSE_THRESHOLD_MS, resume: Optional[RunState] = None,
                 housekeeping_ms: Optional[int] = None):
        self.manifest = manifest
        self.registry = list(registry)
        self.storage = storage
        self.clock = clock
        self.bus = bus
        self.activity = activity
        self.state_path = Path(state_path) if state_path else None
        self.plan = compute_wake_plan(list(manifest.plugin_configs), manifest.wake_policy, threshold_ms)
        self.instances: dict[str, object] = {}
        self.timers = []
        self.wakelock_held = False
        self._lock = threading.RLock()
        self._plugin_locks = {c.plugin_id: threading.RLock() for c in manifest.plugin_configs}
        self._housekeeping_ms = housekeeping_ms or getattr(getattr(storage, "config", None),
                                                          "cache_flush_interval_ms", 5000)
        if resume is not None:
            self.state = resume.copy()
            self.state.error = None
        else:
            self.state = RunState(manifest.experiment_id, clock.now_ms())
        for c in manifest.plugin_configs:
            self.state.plugins.setdefault(c.plugin_id, PluginCounters())
        self.reporter = Reporter(self._sink, manifest.capabilities, gate=self._gate)

    # -- plumbing

    def _gate(self) -> bool:
        if not self.manifest.wake_policy.active_only or self.activity is None:
            return True
        return self.activity.is_active(self.clock.now_ms())

    def _sink(self, plugin_id, payload=None, blob=None) -> None:
        if not self.state.running:
            return
        try:
            self.storage.append(plugin_id, payload=payload, blob=blob, clock=self.clock)
        except StorageError as exc:
            logger.error("storage failure, stopping experiment: %s", exc)
            self.state.error = str(exc)
            self._halt(seal=False)
            return
        with self._lock:
            self.state.plugins[plugin_id].records_emitted += 1

    def _persist(self) -> None:
        if self.state_path is not None:
            with self._lock:
                write_json(self.state_path, self.state.to_json())

    def _poll(self, plugin_id: str, fire: Fire) -> None:
        with self._plugin_locks[plugin_id]:
            if not self.state.running:
                return
            inst = self.instances[plugin_id]
            counters = self.state.plugins[plugin_id]
            tolerance = PRECISE_TOLERANCE_MS if self._is_precise(plugin_id) else COARSE_TOLERANCE_MS
            with self._lock:
                counters.missed_deadlines += fire.skipped + (fire.fired_ms - fire.due_ms > tolerance)
            if not self._gate():
                return
            try:
                payloads = plugin_registry.poll(inst, fire.fired_ms)
            except Exception as exc:
                payloads = [source_unavailable(exc)]
            with self._lock:
                counters.polls_executed += 1
                counters.last_poll_ts = fire.fired_ms
            for p in payloads:
                if isinstance(p, (bytes, bytearray)):
                    self.reporter.emit(inst.descriptor, blob=bytes(p))
                else:
                    self.reporter.emit(inst.descriptor, p)

    def _is_precise(self, plugin_id: str) -> bool:
        return any(p == plugin_id for p, _ in self.plan.precise_polling)

    def _housekeeping(self, fire: Fire) -> None:
        if not self.state.running:
            return
        try:
            self.storage.tick(fire.fired_ms)
        except StorageError as exc:
            self.state.error = str(exc)
            self._halt(seal=False)
            return
        self._persist()

    # -- lifecycle

    def start(self) -> "Run":
        violations = validate_manifest(self.manifest, self.registry)
        if violations:
            raise SchedulerError("; ".join(map(str, violations)))
        started = []
        try:
            for c in self.manifest.plugin_configs:
                inst = plugin_registry.instantiate(c.plugin_id, c.options, self.reporter, self.registry)
                self.instances[c.plugin_id] = inst
                started.append(inst)
            self.state.running = True
            for pid in self.plan.event_plugins:
                if self.bus is None:
                    raise SchedulerError("event plugins need an event bus")
                plugin_registry.subscribe(self.instances[pid], self.bus)
        except Exception:
            self.state.running = False
            for inst in started:
                self._teardown(inst)
            raise
        start_ms = self.clock.now_ms()
        for pid, interval in self.plan.precise_polling:
            self.timers.append(self.clock.schedule_periodic(
                interval, lambda f, pid=pid: self._poll(pid, f), precise=True, start_ms=start_ms))
        for pid, interval in self.plan.coarse_polling:
            self.timers.append(self.clock.schedule_periodic(
                interval, lambda f, pid=pid: self._poll(pid, f), precise=False, start_ms=start_ms))
        self.timers.append(self.clock.schedule_periodic(
            self._housekeeping_ms, self._housekeeping, precise=False, start_ms=start_ms))
        self.wakelock_held = self.plan.holds_wakelock
        self._persist()
        return self

    def _teardown(self, inst) -> None:
        try:
            if inst.kind is PluginKind.EVENT:
                plugin_registry.unsubscribe(inst)
            inst.close()
        except Exception:
            logger.exception("teardown of %s failed", inst.plugin_id)

    def _halt(self, seal: bool) -> None:
        with self._lock:
            was_running = self.state.running
            self.state.running = False
        for t in self.timers:
            t.cancel()
        self.timers.clear()
        self.wakelock_held = False
        if not was_running:
            return
        # let in-flight polls finish so the final seal sees every record
        for lock in self._plugin_locks.values():
            with lock:
                pass
        for inst in self.instances.values():
            self._teardown(inst)
        if seal:
            try:
                self.storage.seal_chunk()
            except StorageError as exc:
                self.state.error = str(exc)
        self._persist()

    def stop(self) -> RunState:
        self._halt(seal=True)
        return self.status()

    def status(self) -> RunState:
        with self._lock:
            return self.state.copy()

    def abandon(self) -> None:
        """Drop the run without sealing or persisting, as a crash would."""
        for t in self.timers:
            t.cancel()
        self.timers.clear()
        self.state.running = False


def start_experiment(manifest: ExperimentManifest, registry, storage, clock: Clock, **kwargs) -> Run:
    return Run(manifest, registry, storage, clock, **kwargs).start()


def stop_experiment(run: Run) -> RunState:
    return run.stop()


def status(run: Run) -> RunState:
    return run.status()
