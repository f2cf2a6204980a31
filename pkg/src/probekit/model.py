"""Shared domain types and the experiment manifest format.

Manifests are UTF-8 JSON. The canonical form (used for signing) has sorted
keys, no insignificant whitespace and lists in declared order, except for
``capabilities`` which is a set and is emitted sorted.
"""

from __future__ import annotations

import enum
import json
import math
import uuid
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional

SCHEMA_VERSION = 1
SUPPORTED_SCHEMA_VERSIONS = frozenset({1})
MIN_POLL_INTERVAL_MS = 10
COARSE_THRESHOLD_MS = 10_000

Scalar = bool | int | float | str


class ManifestError(ValueError):
    """Base class for manifest parse failures."""


class MalformedManifest(ManifestError):
    pass


class UnknownCapability(ManifestError):
    pass


class UnsupportedSchema(ManifestError):
    pass


class Capability(str, enum.Enum):
    SYS_CPU = "SYS_CPU"
    SYS_MEM = "SYS_MEM"
    NET_TRAFFIC = "NET_TRAFFIC"
    PROC_LIST = "PROC_LIST"
    FS_EVENTS = "FS_EVENTS"
    CLOCK_EVENTS = "CLOCK_EVENTS"
    ACTIVITY_STATE = "ACTIVITY_STATE"
    SENSOR_SYNTH = "SENSOR_SYNTH"

    @classmethod
    def parse(cls, name: str) -> "Capability":
        try:
            return cls(name)
        except ValueError:
            raise UnknownCapability(f"unknown capability {name!r}") from None


class PluginKind(str, enum.Enum):
    EVENT = "event"
    POLLING = "polling"


class PayloadKind(str, enum.Enum):
    STRUCTURED = "structured"
    BLOB = "blob"


def version_key(version: str) -> tuple:
    """Sort key comparing dotted versions component-wise, numerically where possible."""
    parts = []
    for piece in version.split("."):
        parts.append((0, int(piece), "") if piece.isdigit() else (1, 0, piece))
    return tuple(parts)


@dataclass(frozen=True)
class PluginConfig:
    plugin_id: str
    kind: PluginKind
    interval_ms: Optional[int] = None
    options: Mapping[str, Scalar] = field(default_factory=dict)

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "plugin_id": self.plugin_id,
            "kind": self.kind.value,
            "options": dict(self.options),
        }
        if self.interval_ms is not None:
            out["interval_ms"] = self.interval_ms
        return out

    @classmethod
    def from_json(cls, obj: Any) -> "PluginConfig":
        if not isinstance(obj, dict):
            raise MalformedManifest("plugin config must be an object")
        pid = obj.get("plugin_id")
        if not isinstance(pid, str) or not pid:
            raise MalformedManifest("plugin config needs a non-empty plugin_id")
        try:
            kind = PluginKind(obj.get("kind"))
        except ValueError:
            raise MalformedManifest(f"{pid}: kind must be 'event' or 'polling'") from None
        interval = obj.get("interval_ms")
        if kind is PluginKind.POLLING:
            if not _is_int(interval) or interval < MIN_POLL_INTERVAL_MS:
                raise MalformedManifest(
                    f"{pid}: polling plugins need interval_ms >= {MIN_POLL_INTERVAL_MS}"
                )
        elif interval is not None:
            raise MalformedManifest(f"{pid}: event plugins take no interval_ms")
        options = obj.get("options", {})
        if not isinstance(options, dict):
            raise MalformedManifest(f"{pid}: options must be an object")
        for name, value in options.items():
            if not isinstance(value, (bool, int, float, str)):
                raise MalformedManifest(f"{pid}: option {name!r} is not a scalar")
            if isinstance(value, float) and not math.isfinite(value):
                raise MalformedManifest(f"{pid}: option {name!r} is not finite")
        return cls(pid, kind, interval, dict(options))


@dataclass(frozen=True)
class GlobalWakePolicy:
    allow_wakelocks: bool = True
    active_only: bool = False

    def to_json(self) -> dict:
        return {"allow_wakelocks": self.allow_wakelocks, "active_only": self.active_only}

    @classmethod
    def from_json(cls, obj: Any) -> "GlobalWakePolicy":
        if not isinstance(obj, dict):
            raise MalformedManifest("wake_policy must be an object")
        values = {k: obj.get(k, d) for k, d in (("allow_wakelocks", True), ("active_only", False))}
        for k, v in values.items():
            if not isinstance(v, bool):
                raise MalformedManifest(f"wake_policy.{k} must be a boolean")
        return cls(**values)


@dataclass(frozen=True)
class UploadPolicy:
    enabled: bool = False
    server_url: str = ""
    unmetered_only: bool = True
    period_minutes: int = 60
    delete_after_ack: bool = True

    def to_json(self) -> dict:
        return {
            "enabled": self.enabled,
            "server_url": self.server_url,
            "unmetered_only": self.unmetered_only,
            "period_minutes": self.period_minutes,
            "delete_after_ack": self.delete_after_ack,
        }

    @classmethod
    def from_json(cls, obj: Any) -> "UploadPolicy":
        if not isinstance(obj, dict):
            raise MalformedManifest("upload_policy must be an object")
        p = cls(
            enabled=obj.get("enabled", False),
            server_url=obj.get("server_url", ""),
            unmetered_only=obj.get("unmetered_only", True),
            period_minutes=obj.get("period_minutes", 60),
            delete_after_ack=obj.get("delete_after_ack", True),
        )
        for name in ("enabled", "unmetered_only", "delete_after_ack"):
            if not isinstance(getattr(p, name), bool):
                raise MalformedManifest(f"upload_policy.{name} must be a boolean")
        if not isinstance(p.server_url, str):
            raise MalformedManifest("upload_policy.server_url must be text")
        if not _is_int(p.period_minutes) or p.period_minutes < 1:
            raise MalformedManifest("upload_policy.period_minutes must be a positive integer")
        if p.enabled and not p.server_url:
            raise MalformedManifest("upload_policy enabled without server_url")
        return p


@dataclass(frozen=True)
class ExperimentManifest:
    experiment_id: str
    name: str
    version: str
    author_name: str
    author_key_fingerprint: str
    description: str
    created_ts: int
    plugin_configs: tuple[PluginConfig, ...]
    capabilities: frozenset[Capability]
    wake_policy: GlobalWakePolicy = GlobalWakePolicy()
    upload_policy: UploadPolicy = UploadPolicy()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        _check_structure(self)

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "experiment_id": self.experiment_id,
            "name": self.name,
            "version": self.version,
            "author_name": self.author_name,
            "author_key_fingerprint": self.author_key_fingerprint,
            "description": self.description,
            "created_ts": self.created_ts,
            "plugin_configs": [c.to_json() for c in self.plugin_configs],
            "capabilities": sorted(c.value for c in self.capabilities),
            "wake_policy": self.wake_policy.to_json(),
            "upload_policy": self.upload_policy.to_json(),
        }

    def config(self, plugin_id: str) -> PluginConfig:
        for c in self.plugin_configs:
            if c.plugin_id == plugin_id:
                return c
        raise KeyError(plugin_id)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_structure(m: ExperimentManifest) -> None:
    if m.schema_version not in SUPPORTED_SCHEMA_VERSIONS:
        raise UnsupportedSchema(f"schema_version {m.schema_version} is not supported")
    try:
        uuid.UUID(m.experiment_id)
    except (ValueError, AttributeError, TypeError):
        raise MalformedManifest(f"experiment_id {m.experiment_id!r} is not a UUID") from None
    for name in ("name", "version", "author_name", "author_key_fingerprint", "description"):
        if not isinstance(getattr(m, name), str):
            raise MalformedManifest(f"{name} must be text")
    if not m.version:
        raise MalformedManifest("version must be non-empty")
    if not _is_int(m.created_ts) or m.created_ts <= 0:
        raise MalformedManifest("created_ts must be a positive integer")
    if not m.plugin_configs:
        raise MalformedManifest("plugin_configs must not be empty")
    ids = [c.plugin_id for c in m.plugin_configs]
    if len(set(ids)) != len(ids):
        raise MalformedManifest("plugin_id values must be unique")


def manifest_from_json(obj: Any) -> ExperimentManifest:
    if not isinstance(obj, dict):
        raise MalformedManifest("manifest must be a JSON object")
    schema = obj.get("schema_version")
    if not _is_int(schema):
        raise MalformedManifest("schema_version must be an integer")
    if schema not in SUPPORTED_SCHEMA_VERSIONS:
        raise UnsupportedSchema(f"schema_version {schema} is not supported")
    caps = obj.get("capabilities")
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise MalformedManifest("capabilities must be a list of names")
    configs = obj.get("plugin_configs")
    if not isinstance(configs, list):
        raise MalformedManifest("plugin_configs must be a list")
    missing = [k for k in ("experiment_id", "name", "version", "created_ts") if k not in obj]
    if missing:
        raise MalformedManifest(f"missing fields: {', '.join(missing)}")
    return ExperimentManifest(
        experiment_id=obj["experiment_id"],
        name=obj["name"],
        version=obj["version"],
        author_name=obj.get("author_name", ""),
        author_key_fingerprint=obj.get("author_key_fingerprint", ""),
        description=obj.get("description", ""),
        created_ts=obj["created_ts"],
        plugin_configs=tuple(PluginConfig.from_json(c) for c in configs),
        capabilities=frozenset(Capability.parse(c) for c in caps),
        wake_policy=GlobalWakePolicy.from_json(obj.get("wake_policy", {})),
        upload_policy=UploadPolicy.from_json(obj.get("upload_policy", {})),
        schema_version=schema,
    )


def parse_manifest(data: bytes | str) -> ExperimentManifest:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedManifest(f"manifest is not UTF-8: {exc}") from None
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"manifest is not valid JSON: {exc}") from None
    return manifest_from_json(obj)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def canonicalize_manifest(m: ExperimentManifest) -> bytes:
    return canonical_json(m.to_json())


def serialize_manifest(m: ExperimentManifest, indent: Optional[int] = 2) -> bytes:
    """Human-friendly serialization; parses back to an equal manifest."""
    return json.dumps(m.to_json(), indent=indent, ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    subject: str = ""

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def required_capabilities(configs: Iterable[PluginConfig], registry) -> frozenset[Capability]:
    index = {d.plugin_id: d for d in registry}
    caps: set[Capability] = set()
    for c in configs:
        caps |= index[c.plugin_id].required_capabilities
    return frozenset(caps)


def validate_manifest(m: ExperimentManifest, registry) -> list[Violation]:
    """Check a manifest against the plugin registry. Returns all violations found."""
    index = {d.plugin_id: d for d in registry}
    out: list[Violation] = []
    known: list[PluginConfig] = []
    for c in m.plugin_configs:
        desc = index.get(c.plugin_id)
        if desc is None:
            out.append(Violation("unknown_plugin", f"unknown plugin {c.plugin_id!r}", c.plugin_id))
            continue
        known.append(c)
        if desc.kind is not c.kind:
            out.append(Violation(
                "kind_mismatch",
                f"{c.plugin_id} is a {desc.kind.value} plugin, configured as {c.kind.value}",
                c.plugin_id,
            ))
        for problem in desc.check_options(c.options):
            out.append(Violation("bad_option", f"{c.plugin_id}: {problem}", c.plugin_id))

    if len(known) == len(m.plugin_configs):
        needed = required_capabilities(known, registry)
        extra = m.capabilities - needed
        lacking = needed - m.capabilities
        if extra:
            names = ", ".join(sorted(c.value for c in extra))
            out.append(Violation("over_provisioned", f"capabilities not required by any plugin: {names}"))
        if lacking:
            names = ", ".join(sorted(c.value for c in lacking))
            out.append(Violation("under_provisioned", f"capabilities missing for selected plugins: {names}"))

    if not m.wake_policy.allow_wakelocks:
        for c in m.plugin_configs:
            if c.kind is PluginKind.POLLING and c.interval_ms is not None and c.interval_ms <= COARSE_THRESHOLD_MS:
                out.append(Violation(
                    "wake_policy_conflict",
                    f"{c.plugin_id} polls every {c.interval_ms} ms, which needs wakelocks",
                    c.plugin_id,
                ))
    return out


@dataclass(frozen=True)
class BlobRef:
    blob_name: str
    byte_len: int
    content_crc32: int

    def to_json(self) -> dict:
        return {"blob_name": self.blob_name, "byte_len": self.byte_len, "content_crc32": self.content_crc32}

    @classmethod
    def from_json(cls, obj: dict) -> "BlobRef":
        return cls(obj["blob_name"], obj["byte_len"], obj["content_crc32"])


@dataclass(frozen=True)
class LogRecord:
    ts_ms: int
    plugin_id: str
    seq: int
    payload_kind: PayloadKind
    payload: Any = None
    blob_ref: Optional[BlobRef] = None

    def __post_init__(self):
        if self.ts_ms <= 0:
            raise ValueError("ts_ms must be positive")
        if (self.payload_kind is PayloadKind.BLOB) != (self.blob_ref is not None):
            raise ValueError("blob records carry a blob_ref and nothing else")
        if self.payload_kind is PayloadKind.BLOB and self.payload is not None:
            raise ValueError("blob records carry no structured payload")

    def to_json(self) -> dict:
        out = {
            "ts_ms": self.ts_ms,
            "plugin_id": self.plugin_id,
            "seq": self.seq,
            "payload_kind": self.payload_kind.value,
        }
        if self.payload_kind is PayloadKind.BLOB:
            out["blob_ref"] = self.blob_ref.to_json()
        else:
            out["payload"] = self.payload
        return out

    def to_line(self) -> bytes:
        return canonical_json(self.to_json()) + b"\n"

    @classmethod
    def from_json(cls, obj: dict) -> "LogRecord":
        kind = PayloadKind(obj["payload_kind"])
        blob = BlobRef.from_json(obj["blob_ref"]) if kind is PayloadKind.BLOB else None
        return cls(obj["ts_ms"], obj["plugin_id"], obj["seq"], kind, obj.get("payload"), blob)


@dataclass(frozen=True)
class ChunkManifest:
    chunk_id: str
    experiment_id: str
    device_id: str
    chunk_seq: int
    first_ts: int
    last_ts: int
    record_count: int
    blob_count: int
    records_crc32: int
    uncompressed_bytes: int
    compressed_bytes: int
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "experiment_id": self.experiment_id,
            "device_id": self.device_id,
            "chunk_seq": self.chunk_seq,
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
            "record_count": self.record_count,
            "blob_count": self.blob_count,
            "records_crc32": self.records_crc32,
            "uncompressed_bytes": self.uncompressed_bytes,
            "compressed_bytes": self.compressed_bytes,
            "schema_version": self.schema_version,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChunkManifest":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__})

    @property
    def compression_ratio(self) -> float:
        return self.compressed_bytes / self.uncompressed_bytes if self.uncompressed_bytes else 0.0


@dataclass(frozen=True)
class DeviceIdentity:
    device_id: str
    platform_label: str

    @classmethod
    def load_or_create(cls, path) -> "DeviceIdentity":
        """Read the persisted identity at ``path``, creating it on first use."""
        import platform
        from pathlib import Path

        from probekit.fsutil import atomic_write

        path = Path(path)
        if path.exists():
            obj = json.loads(path.read_text())
            return cls(obj["device_id"], obj["platform_label"])
        ident = cls(str(uuid.uuid4()), f"{platform.system()}-{platform.machine()}")
        atomic_write(path, canonical_json({"device_id": ident.device_id, "platform_label": ident.platform_label}))
        return ident
