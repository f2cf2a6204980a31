"""Chunk uploader: at-least-once delivery, delete only after acknowledgement."""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from probekit.fsutil import read_json, write_json
from probekit.model import UploadPolicy

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 30.0
BACKOFF_CAP_S = 1800.0


class TransportError(Exception):
    """The request may or may not have reached the server."""


class HttpTransport:
    def __init__(self, server_url: str, token: str = "", timeout: float = 30.0):
        self.server_url = server_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def post_chunk(self, experiment_id: str, device_id: str, chunk_id: str, body: bytes) -> tuple[int, dict]:
        req = urllib.request.Request(
            f"{self.server_url}/v1/data/{experiment_id}/{device_id}/{chunk_id}",
            data=body, method="POST",
            headers={"Content-Type": "application/zip", "Authorization": f"Bearer {self.token}"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read() or b"{}")
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read() or b"{}")
            except ValueError:
                payload = {}
            return exc.code, payload
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(str(exc)) from exc


def backoff_delay(failures: int, base: float = BACKOFF_BASE_S, cap: float = BACKOFF_CAP_S) -> float:
    if failures <= 0:
        return 0.0
    return min(cap, base * 2 ** (failures - 1))


@dataclass
class UploadReport:
    attempted: int = 0
    stored: int = 0
    duplicates: int = 0
    deleted: int = 0
    quarantined: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    skipped_reason: Optional[str] = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


class Uploader:
    """Posts sealed chunks of one storage to the collection service.

    Backoff state lives in ``state_path`` so a restarted agent keeps waiting
    after repeated network failures.
    """

    def __init__(self, transport, state_path=None, time_fn: Callable[[], float] = time.time,
                 base_s: float = BACKOFF_BASE_S, cap_s: float = BACKOFF_CAP_S):
        self.transport = transport
        self.state_path = Path(state_path) if state_path else None
        self.time_fn = time_fn
        self.base_s = base_s
        self.cap_s = cap_s
        self._state = read_json(self.state_path, {}) if self.state_path else {}

    @property
    def failures(self) -> int:
        return self._state.get("failures", 0)

    @property
    def next_attempt(self) -> float:
        return self._state.get("next_attempt", 0.0)

    def _save(self) -> None:
        if self.state_path is not None:
            write_json(self.state_path, self._state)

    def due(self) -> bool:
        return self.time_fn() >= self.next_attempt

    def upload(self, storage, policy: UploadPolicy, metered: bool = False, force: bool = False) -> UploadReport:
        report = UploadReport()
        if not policy.enabled:
            report.skipped_reason = "upload disabled by experiment"
            return report
        if policy.unmetered_only and metered:
            report.skipped_reason = "network is metered"
            return report
        if not force and not self.due():
            report.skipped_reason = "backing off"
            return report
        network_failed = False
        for path in storage.chunk_paths():
            chunk_id = path.stem.split("-", 1)[1]
            report.attempted += 1
            try:
                status, body = self.transport.post_chunk(
                    storage.experiment_id, storage.device_id, chunk_id, path.read_bytes())
            except TransportError as exc:
                logger.warning("upload of %s failed: %s", chunk_id, exc)
                report.failed.append(chunk_id)
                network_failed = True
                break
            if status == 200:
                report.stored += 1
                report.duplicates += bool(body.get("duplicate"))
                if policy.delete_after_ack:
                    storage.delete_chunk(chunk_id)
                    report.deleted += 1
            elif status in (400, 409, 413):
                logger.error("server rejected %s (%s): %s", chunk_id, status, body.get("error"))
                storage.quarantine_chunk(chunk_id)
                report.quarantined.append(chunk_id)
            else:
                logger.warning("server answered %s for %s", status, chunk_id)
                report.failed.append(chunk_id)
                network_failed = True
                break
        if network_failed:
            failures = self.failures + 1
            self._state = {"failures": failures,
                           "next_attempt": self.time_fn() + backoff_delay(failures, self.base_s, self.cap_s)}
        else:
            self._state = {"failures": 0, "next_attempt": 0.0, "last_success": self.time_fn()}
        self._save()
        return report
