"""In-process event bus and the host event sources that feed it.

Sources are checked by ``EventBus.pump(now_ms)``; the agent runs a background
pump thread, tests call ``pump`` directly.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

logger = logging.getLogger(__name__)


class EventBus:
    def __init__(self):
        self._lock = threading.RLock()
        self._subs: dict[str, dict[int, Callable[[Mapping[str, Any]], None]]] = {}
        self._sources: dict[int, Any] = {}
        self._next = 0
        self._pump_thread: Optional[threading.Thread] = None
        self._pump_stop = threading.Event()

    def subscribe(self, topic: str, callback: Callable[[Mapping[str, Any]], None]) -> int:
        with self._lock:
            self._next += 1
            self._subs.setdefault(topic, {})[self._next] = callback
            return self._next

    def unsubscribe(self, token: int) -> None:
        with self._lock:
            for subs in self._subs.values():
                subs.pop(token, None)

    def publish(self, topic: str, event: Mapping[str, Any]) -> int:
        with self._lock:
            callbacks = list(self._subs.get(topic, {}).values())
        for cb in callbacks:
            try:
                cb(event)
            except Exception:
                logger.exception("event subscriber failed on topic %s", topic)
        return len(callbacks)

    def add_source(self, source) -> int:
        with self._lock:
            self._next += 1
            self._sources[self._next] = source
            return self._next

    def remove_source(self, token: int) -> None:
        with self._lock:
            self._sources.pop(token, None)

    def pump(self, now_ms: Optional[int] = None) -> None:
        if now_ms is None:
            now_ms = int(time.time() * 1000)
        with self._lock:
            sources = list(self._sources.values())
        for src in sources:
            try:
                src.check(self, now_ms)
            except Exception:
                logger.exception("event source %r failed", src)

    def start_pumping(self, interval_s: float = 0.5, now_fn: Optional[Callable[[], int]] = None) -> None:
        if self._pump_thread is not None:
            return
        self._pump_stop.clear()

        def loop():
            while not self._pump_stop.wait(interval_s):
                self.pump(now_fn() if now_fn else None)

        self._pump_thread = threading.Thread(target=loop, name="probekit-bus", daemon=True)
        self._pump_thread.start()

    def stop_pumping(self) -> None:
        if self._pump_thread is None:
            return
        self._pump_stop.set()
        self._pump_thread.join()
        self._pump_thread = None


class DirectoryWatcher:
    """Snapshot-diffing watcher for one directory tree; publishes on topic ``fs``."""

    def __init__(self, path, recursive: bool = True):
        self.path = Path(path)
        self.recursive = recursive
        self._snapshot = self._scan()

    def _scan(self) -> dict[str, tuple[int, int]]:
        snap: dict[str, tuple[int, int]] = {}
        if not self.path.is_dir():
            return snap
        walker = os.walk(self.path) if self.recursive else [(str(self.path), [], os.listdir(self.path))]
        for root, _dirs, files in walker:
            for name in files:
                full = os.path.join(root, name)
                try:
                    st = os.stat(full)
                except FileNotFoundError:
                    continue
                snap[os.path.relpath(full, self.path)] = (st.st_mtime_ns, st.st_size)
        return snap

    def check(self, bus: EventBus, now_ms: int) -> None:
        new = self._scan()
        old = self._snapshot
        self._snapshot = new
        for rel in sorted(new.keys() - old.keys()):
            bus.publish("fs", {"action": "created", "root": str(self.path), "path": rel, "size": new[rel][1]})
        for rel in sorted(old.keys() & new.keys()):
            if old[rel] != new[rel]:
                bus.publish("fs", {"action": "modified", "root": str(self.path), "path": rel, "size": new[rel][1]})
        for rel in sorted(old.keys() - new.keys()):
            bus.publish("fs", {"action": "deleted", "root": str(self.path), "path": rel})


class ClockWatcher:
    """Detects local timezone changes and wall-clock jumps; publishes on ``clock``."""

    def __init__(self, jump_threshold_ms: int = 2000, zone_fn: Optional[Callable[[], str]] = None):
        self.jump_threshold_ms = jump_threshold_ms
        self._zone_fn = zone_fn or _local_zone
        self._zone = self._zone_fn()
        self._last_wall = None
        self._last_mono = None

    def check(self, bus: EventBus, now_ms: int) -> None:
        zone = self._zone_fn()
        if zone != self._zone:
            bus.publish("clock", {"kind": "timezone_changed", "old_zone": self._zone, "new_zone": zone})
            self._zone = zone
        # host wall clock, not now_ms: a simulated clock would look like a jump
        wall = time.time_ns() // 1_000_000
        mono = time.monotonic_ns() // 1_000_000
        if self._last_wall is not None:
            drift = (wall - self._last_wall) - (mono - self._last_mono)
            if abs(drift) > self.jump_threshold_ms:
                bus.publish("clock", {"kind": "time_set", "delta_ms": drift})
        self._last_wall, self._last_mono = wall, mono


def _local_zone() -> str:
    tz = os.environ.get("TZ")
    if tz:
        return tz
    return time.strftime("%Z") or "UTC"


class ActivityTrace:
    """Replays a ``<ts_ms> active|idle`` trace file.

    ``is_active(t)`` gives the state in effect at ``t`` (``initial`` before the
    first line). As a bus source it publishes each transition on ``activity``
    once the clock passes it.
    """

    def __init__(self, transitions: list[tuple[int, bool]], initial: bool = True):
        self.transitions = sorted(transitions)
        self.initial = initial
        self._cursor = 0

    @classmethod
    def from_file(cls, path, initial: bool = True) -> "ActivityTrace":
        items = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                ts, state = line.replace(",", " ").split()
                if state not in ("active", "idle"):
                    raise ValueError(state)
                items.append((int(ts), state == "active"))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected '<ts_ms> active|idle'") from None
        return cls(items, initial)

    def is_active(self, now_ms: int) -> bool:
        state = self.initial
        for ts, active in self.transitions:
            if ts > now_ms:
                break
            state = active
        return state

    def check(self, bus: EventBus, now_ms: int) -> None:
        while self._cursor < len(self.transitions) and self.transitions[self._cursor][0] <= now_ms:
            ts, active = self.transitions[self._cursor]
            self._cursor += 1
            bus.publish("activity", {"state": "active" if active else "idle", "trace_ts": ts})
