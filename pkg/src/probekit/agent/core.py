"""Device agent: installed experiments, run control, restart recovery, data egress."""

from __future__ import annotations

import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from probekit.agent.uploader import HttpTransport, UploadReport, Uploader
from probekit.builder import Package, PackageError, descriptor_digest, fingerprint, load_public_key, verify_package
from probekit.fsutil import atomic_write, private_dir, read_json, write_json
from probekit.model import DeviceIdentity, ExperimentManifest, manifest_from_json
from probekit.plugins import ActivityTrace, EventBus, describe_all
from probekit.scheduler import RealClock, Run, RunState, load_run_state, start_experiment
from probekit.storage import Storage, StorageConfig

logger = logging.getLogger(__name__)


class AgentError(Exception):
    pass


class NotInstalled(AgentError, KeyError):
    def __str__(self):
        return f"experiment {self.args[0]} is not installed"


class DuplicateExperiment(AgentError):
    pass


class SignatureRejected(AgentError):
    pass


class AlreadyRunning(AgentError):
    pass


@dataclass(frozen=True)
class InstalledExperiment:
    experiment_id: str
    version: str
    package_path: Path
    verified: bool
    manifest: ExperimentManifest
    install_ts: int
    running: bool
    origin: str
    signer_fingerprint: str

    def to_json(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "version": self.version,
            "package_path": str(self.package_path),
            "verified": self.verified,
            "manifest": self.manifest.to_json(),
            "install_ts": self.install_ts,
            "origin": self.origin,
            "signer_fingerprint": self.signer_fingerprint,
        }


class Agent:
    """All agent state lives under ``home``; see README for the layout."""

    def __init__(self, home, clock=None, bus: Optional[EventBus] = None, registry=None,
                 network_metered: Optional[Callable[[], bool]] = None, transport_factory=None,
                 time_fn: Callable[[], float] = time.time):
        self.home = private_dir(home)
        for sub in ("packages", "trusted_keys", "data", "runs", "uploads"):
            private_dir(self.home / sub)
        self.config = read_json(self.home / "config.json", {})
        self.clock = clock
        self.bus = bus if bus is not None else EventBus()
        self.registry = list(registry if registry is not None else describe_all())
        self.device = DeviceIdentity.load_or_create(self.home / "device.json")
        self._metered = network_metered or (lambda: bool(self.config.get("network_metered", False)))
        self._transport_factory = transport_factory or self._http_transport
        self.time_fn = time_fn
        self.runs: dict[str, Run] = {}
        self._storages: dict[str, Storage] = {}
        self._lock = threading.RLock()

    # -- persistence

    @property
    def _installed_path(self) -> Path:
        return self.home / "installed.json"

    @property
    def _running_path(self) -> Path:
        return self.home / "running.json"

    def _installed(self) -> dict[str, dict]:
        return read_json(self._installed_path, {}) or {}

    def _running_set(self) -> set[str]:
        ids = read_json(self._running_path, [])
        if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
            raise ValueError("running set is not a list of experiment ids")
        return set(ids)

    def _save_running(self, ids: set[str]) -> None:
        write_json(self._running_path, sorted(ids))

    def _record(self, experiment_id: str) -> InstalledExperiment:
        entry = self._installed().get(experiment_id)
        if entry is None:
            raise NotInstalled(experiment_id)
        return InstalledExperiment(
            experiment_id=entry["experiment_id"],
            version=entry["version"],
            package_path=Path(entry["package_path"]),
            verified=entry["verified"],
            manifest=manifest_from_json(entry["manifest"]),
            install_ts=entry["install_ts"],
            running=experiment_id in self.runs and self.runs[experiment_id].state.running,
            origin=entry["origin"],
            signer_fingerprint=entry["signer_fingerprint"],
        )

    # -- keys

    def trust_key(self, pem_path) -> str:
        key = load_public_key(pem_path)
        fp = fingerprint(key)
        atomic_write(self.home / "trusted_keys" / f"{fp}.pem", load_pem(key), mode=0o644)
        return fp

    def trusted_keys(self) -> dict[str, object]:
        keys = {}
        for p in sorted((self.home / "trusted_keys").glob("*.pem")):
            try:
                key = load_public_key(p)
            except Exception as exc:
                logger.warning("ignoring unreadable trusted key %s: %s", p, exc)
                continue
            keys[fingerprint(key)] = key
        return keys

    # -- install

    def import_package(self, pkg_path, trusted_keys=None, origin: str = "file_import") -> InstalledExperiment:
        data = Path(pkg_path).read_bytes()
        return self._install(data, trusted_keys, origin)

    def _install(self, data: bytes, trusted_keys, origin: str) -> InstalledExperiment:
        try:
            pkg = Package.from_bytes(data)
        except PackageError as exc:
            raise SignatureRejected(str(exc)) from None
        keys = dict(self.trusted_keys())
        for k in trusted_keys or ():
            key = load_public_key(k)
            keys[fingerprint(key)] = key
        info = pkg.signature_info()
        if info is None:
            raise SignatureRejected("package is unsigned")
        signer = info.get("key_fingerprint")
        if signer not in keys:
            raise SignatureRejected(f"package signed by untrusted key {signer}")
        result = verify_package(pkg, keys[signer])
        if not result.ok:
            raise SignatureRejected(f"signature check failed: {result.reason}")
        manifest = pkg.manifest
        index = {d.plugin_id: d for d in self.registry}
        for entry in pkg.lock:
            desc = index.get(entry["plugin_id"])
            if desc is None:
                raise AgentError(f"package needs plugin {entry['plugin_id']!r}, not available here")
            if descriptor_digest(desc) != entry["descriptor_digest"]:
                raise AgentError(f"plugin {entry['plugin_id']!r} differs from the one the package was built for")
        with self._lock:
            installed = self._installed()
            prev = installed.get(manifest.experiment_id)
            if prev is not None:
                if prev["version"] == manifest.version:
                    raise DuplicateExperiment(
                        f"{manifest.experiment_id} version {manifest.version} is already installed")
                if manifest.experiment_id in self.runs and self.runs[manifest.experiment_id].state.running:
                    raise AlreadyRunning("stop the experiment before upgrading it")
            dest = self.home / "packages" / f"{manifest.experiment_id}-{manifest.version}.pkg"
            atomic_write(dest, data)
            record = InstalledExperiment(
                manifest.experiment_id, manifest.version, dest, True, manifest,
                int(self.time_fn() * 1000), False, origin, signer,
            )
            installed[manifest.experiment_id] = record.to_json()
            write_json(self._installed_path, installed)
        logger.info("installed %s (%s) from %s", manifest.name, manifest.experiment_id, origin)
        return record

    def fetch(self, server_url: str, experiment_id: str, version: Optional[str] = None,
              trusted_keys=None) -> InstalledExperiment:
        url = f"{server_url.rstrip('/')}/v1/experiments/{experiment_id}"
        if version:
            url += f"?version={version}"
        try:
            with urllib.request.urlopen(url, timeout=30) as resp:
                data = resp.read()
        except urllib.error.HTTPError as exc:
            raise AgentError(f"server answered {exc.code} for {experiment_id}") from None
        except (urllib.error.URLError, OSError) as exc:
            raise AgentError(f"cannot reach {server_url}: {exc}") from None
        return self._install(data, trusted_keys, "server_fetch")

    def list(self) -> list[InstalledExperiment]:
        return [self._record(eid) for eid in sorted(self._installed())]

    def info(self, experiment_id: str) -> dict:
        rec = self._record(experiment_id)
        m = rec.manifest
        index = {d.plugin_id: d for d in self.registry}
        return {
            "experiment_id": m.experiment_id,
            "name": m.name,
            "version": m.version,
            "author": m.author_name,
            "key_fingerprint": m.author_key_fingerprint,
            "description": m.description,
            "created_ts": m.created_ts,
            "origin": rec.origin,
            "verified": rec.verified,
            "install_ts": rec.install_ts,
            "running": rec.running,
            "plugins": [
                {
                    "plugin_id": c.plugin_id,
                    "kind": c.kind.value,
                    "interval_ms": c.interval_ms,
                    "options": dict(c.options),
                    "description": index[c.plugin_id].description if c.plugin_id in index else "",
                }
                for c in m.plugin_configs
            ],
            "capabilities": sorted(c.value for c in m.capabilities),
            "wake_policy": m.wake_policy.to_json(),
            "upload_policy": m.upload_policy.to_json(),
        }

    # -- run control

    def storage_config(self) -> StorageConfig:
        return StorageConfig(self.home / "data", **self.config.get("storage", {}))

    def storage(self, experiment_id: str) -> Storage:
        with self._lock:
            if experiment_id not in self._storages:
                self._storages[experiment_id] = Storage(
                    self.storage_config(), experiment_id, self.device.device_id, self._clock())
            return self._storages[experiment_id]

    def _clock(self):
        if self.clock is None:
            self.clock = RealClock()
        return self.clock

    def _activity(self):
        trace = self.config.get("activity_trace")
        return ActivityTrace.from_file(trace) if trace else None

    def _state_path(self, experiment_id: str) -> Path:
        return self.home / "runs" / f"{experiment_id}.json"

    def start(self, experiment_id: str, resume: bool = False) -> RunState:
        with self._lock:
            rec = self._record(experiment_id)
            if not rec.verified:
                raise SignatureRejected(f"{experiment_id} is not verified")
            if rec.running:
                raise AlreadyRunning(f"{experiment_id} is already running")
            prior = load_run_state(self._state_path(experiment_id)) if resume else None
            run = start_experiment(
                rec.manifest, self.registry, self.storage(experiment_id), self._clock(),
                bus=self.bus, activity=self._activity(), state_path=self._state_path(experiment_id),
                resume=prior,
            )
            self.runs[experiment_id] = run
            self._save_running(self._running_set() | {experiment_id})
            return run.status()

    def stop(self, experiment_id: str) -> RunState:
        with self._lock:
            self._record(experiment_id)
            run = self.runs.get(experiment_id)
            self._save_running(self._running_set() - {experiment_id})
            if run is None:
                state = load_run_state(self._state_path(experiment_id))
                if state is None:
                    return RunState(experiment_id, 0)
                if state.running:
                    state = replace(state, running=False)
                    write_json(self._state_path(experiment_id), state.to_json())
                return state
            return run.stop()

    def status(self, experiment_id: str) -> RunState:
        self._record(experiment_id)
        run = self.runs.get(experiment_id)
        if run is not None:
            return run.status()
        state = load_run_state(self._state_path(experiment_id))
        if state is None:
            return RunState(experiment_id, 0)
        state.running = False
        return state

    def restore_running(self) -> list[str]:
        """Restart every experiment that was running when the agent last went down."""
        try:
            wanted = self._running_set()
        except ValueError:
            logger.warning("running-set file is corrupted; starting with no experiments")
            self._save_running(set())
            return []
        restored, dropped = [], set()
        for eid in sorted(wanted):
            try:
                rec = self._record(eid)
                if not rec.package_path.exists():
                    raise AgentError(f"package file {rec.package_path} is missing")
                self.start(eid, resume=True)
                restored.append(eid)
            except AlreadyRunning:
                restored.append(eid)
            except Exception as exc:
                logger.warning("cannot restore %s, marking it stopped: %s", eid, exc)
                dropped.add(eid)
        if dropped:
            self._save_running(self._running_set() - dropped)
        return restored

    def shutdown(self) -> None:
        """Stop runs (sealing data) but keep the running set for the next start."""
        with self._lock:
            keep = self._running_set()
            for run in list(self.runs.values()):  # stop() does not touch the running set
                if run.state.running:
                    run.stop()
            self.runs.clear()
            self._save_running(keep)
        if self.clock is not None:
            self.clock.close()

    # -- data egress

    def dump(self, experiment_id: str, dest_dir) -> list[Path]:
        self._record(experiment_id)
        return self.storage(experiment_id).dump(dest_dir)

    def _upload_token(self) -> str:
        path = self.config.get("upload_token_file")
        if path and Path(path).exists():
            return Path(path).read_text().strip()
        return self.config.get("upload_token", "")

    def _http_transport(self, server_url: str):
        return HttpTransport(server_url, self._upload_token())

    def uploader(self, experiment_id: str) -> Uploader:
        rec = self._record(experiment_id)
        return Uploader(self._transport_factory(rec.manifest.upload_policy.server_url),
                        self.home / "uploads" / f"{experiment_id}.json", self.time_fn)

    def upload_now(self, experiment_id: str, force: bool = True) -> UploadReport:
        rec = self._record(experiment_id)
        return self.uploader(experiment_id).upload(
            self.storage(experiment_id), rec.manifest.upload_policy, metered=self._metered(), force=force)

    def upload_due(self) -> dict[str, UploadReport]:
        """One pass of the background uploader over experiments whose period has elapsed."""
        out = {}
        for rec in self.list():
            policy = rec.manifest.upload_policy
            if not policy.enabled:
                continue
            up = self.uploader(rec.experiment_id)
            last = up._state.get("last_success", 0.0)
            if self.time_fn() - last < policy.period_minutes * 60 or not up.due():
                continue
            out[rec.experiment_id] = up.upload(self.storage(rec.experiment_id), policy,
                                               metered=self._metered())
        return out


def load_pem(key) -> bytes:
    from cryptography.hazmat.primitives import serialization

    return key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)
