"""Plugin contract: descriptors, option schemas, instances and the reporter handle."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

from probekit.model import Capability, PluginKind, Scalar

_TYPES = {
    "boolean": lambda v: isinstance(v, bool),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "decimal": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "text": lambda v: isinstance(v, str),
}


class PluginError(Exception):
    pass


class UnknownPlugin(PluginError, KeyError):
    def __str__(self):
        return f"unknown plugin {self.args[0]!r}"


class OptionError(PluginError, ValueError):
    pass


class CapabilityDenied(PluginError, PermissionError):
    pass


@dataclass(frozen=True)
class OptionSpec:
    name: str
    value_type: str
    default: Scalar
    min: Optional[float] = None
    max: Optional[float] = None
    allowed_values: Optional[frozenset[str]] = None
    help: str = ""

    def __post_init__(self):
        if self.value_type not in _TYPES:
            raise ValueError(f"bad option type {self.value_type!r}")
        problem = self.check(self.default)
        if problem:
            raise ValueError(f"default for {self.name} invalid: {problem}")

    def check(self, value: Any) -> Optional[str]:
        if not _TYPES[self.value_type](value):
            return f"option {self.name!r} expects {self.value_type}, got {value!r}"
        if self.min is not None and value < self.min:
            return f"option {self.name!r}={value!r} below minimum {self.min}"
        if self.max is not None and value > self.max:
            return f"option {self.name!r}={value!r} above maximum {self.max}"
        if self.allowed_values is not None and value not in self.allowed_values:
            return f"option {self.name!r}={value!r} not in {sorted(self.allowed_values)}"
        return None

    def describe(self) -> str:
        text = f"{self.name}:{self.value_type}={self.default!r}"
        if self.min is not None or self.max is not None:
            text += f" [{'' if self.min is None else self.min}..{'' if self.max is None else self.max}]"
        if self.allowed_values:
            text += " {" + "|".join(sorted(self.allowed_values)) + "}"
        return text


@dataclass(frozen=True)
class PluginDescriptor:
    plugin_id: str
    kind: PluginKind
    author: str
    description: str
    required_capabilities: frozenset[Capability]
    option_schema: tuple[OptionSpec, ...] = ()
    default_interval_ms: Optional[int] = None
    factory: Optional[Callable[..., "PluginInstance"]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.required_capabilities:
            raise ValueError(f"{self.plugin_id}: required_capabilities must not be empty")
        if (self.kind is PluginKind.POLLING) != (self.default_interval_ms is not None):
            raise ValueError(f"{self.plugin_id}: default_interval_ms is for polling plugins only")

    def check_options(self, options: Mapping[str, Any]) -> list[str]:
        specs = {s.name: s for s in self.option_schema}
        problems = [f"unknown option {name!r}" for name in options if name not in specs]
        for name, value in options.items():
            if name in specs:
                problem = specs[name].check(value)
                if problem:
                    problems.append(problem)
        return problems

    def resolve_options(self, options: Mapping[str, Any]) -> dict[str, Scalar]:
        problems = self.check_options(options)
        if problems:
            raise OptionError(f"{self.plugin_id}: " + "; ".join(problems))
        resolved = {s.name: s.default for s in self.option_schema}
        resolved.update(options)
        return resolved

    def to_json(self) -> dict:
        """Metadata without the factory; hashed into plugins.lock."""
        return {
            "plugin_id": self.plugin_id,
            "kind": self.kind.value,
            "author": self.author,
            "description": self.description,
            "required_capabilities": sorted(c.value for c in self.required_capabilities),
            "option_schema": [
                {
                    "name": s.name,
                    "value_type": s.value_type,
                    "default": s.default,
                    "min": s.min,
                    "max": s.max,
                    "allowed_values": sorted(s.allowed_values) if s.allowed_values else None,
                }
                for s in self.option_schema
            ],
            "default_interval_ms": self.default_interval_ms,
        }


class Reporter:
    """Sink-facing handle that plugins emit through.

    ``sink`` is a callable ``sink(plugin_id, payload=None, blob=None)``. Emissions
    from a plugin whose required capabilities are not all granted are refused.
    Safe to call from several threads.
    """

    def __init__(self, sink: Callable[..., Any], granted: frozenset[Capability],
                 gate: Optional[Callable[[], bool]] = None):
        self._sink = sink
        self.granted = frozenset(granted)
        self._gate = gate
        self._lock = threading.Lock()

    def check(self, descriptor: PluginDescriptor) -> None:
        missing = descriptor.required_capabilities - self.granted
        if missing:
            names = ", ".join(sorted(c.value for c in missing))
            raise CapabilityDenied(f"{descriptor.plugin_id} needs ungranted capabilities: {names}")

    def emit(self, descriptor: PluginDescriptor, payload: Any = None, blob: Optional[bytes] = None) -> bool:
        self.check(descriptor)
        if self._gate is not None and not self._gate():
            return False
        with self._lock:
            self._sink(descriptor.plugin_id, payload=payload, blob=blob)
        return True


class PluginInstance:
    """A configured plugin. Polling plugins override ``poll``; event plugins
    override ``on_event`` and declare the bus ``topic`` they listen on."""

    topic: Optional[str] = None

    def __init__(self, descriptor: PluginDescriptor, options: Mapping[str, Scalar], reporter: Optional[Reporter]):
        self.descriptor = descriptor
        self.resolved_options = dict(options)
        self.reporter = reporter
        self._subscription = None

    @property
    def plugin_id(self) -> str:
        return self.descriptor.plugin_id

    @property
    def kind(self) -> PluginKind:
        return self.descriptor.kind

    def poll(self, now_ms: int) -> list[Any]:
        raise PluginError(f"{self.plugin_id} is not a polling plugin")

    def on_event(self, event: Mapping[str, Any]) -> Optional[Any]:
        """Turn a bus event into a payload, or None to ignore it."""
        raise PluginError(f"{self.plugin_id} is not an event plugin")

    def attach(self, bus) -> None:
        """Hook for event plugins that need a source on the bus (e.g. a watcher)."""

    def detach(self, bus) -> None:
        pass

    def close(self) -> None:
        pass

    def _deliver(self, event: Mapping[str, Any]) -> None:
        payload = self.on_event(event)
        if payload is not None and self.reporter is not None:
            self.reporter.emit(self.descriptor, payload)
