"""Storage manager: record cache, open-chunk staging and sealed chunk files.

On-disk layout under ``data_dir``::

    <experiment_id>/<device_id>/
        state.json                      next chunk_seq
        .open/meta.json                 the unsealed chunk being filled
        .open/records.jsonl
        .open/blobs/<name>
        <chunk_seq:08d>-<chunk_id>.zip  sealed chunks

A sealed chunk is a ZIP holding ``records.jsonl`` and ``blobs/*`` (DEFLATE)
plus ``manifest.json``. The archive comment carries a CRC-32 of every byte
before it, so a flipped bit anywhere in the file is detected on read.
"""

from __future__ import annotations

import errno
import io
import json
import logging
import os
import re
import shutil
import threading
import uuid
import zipfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from probekit.fsutil import atomic_write, fsync_dir, private_dir, read_json, write_json
from probekit.model import BlobRef, ChunkManifest, LogRecord, PayloadKind, canonical_json

logger = logging.getLogger(__name__)

MiB = 1 << 20
KiB = 1 << 10
COMMENT_PREFIX = b"probekit-crc32:"
COMMENT_LEN = len(COMMENT_PREFIX) + 8
CHUNK_NAME = re.compile(r"^(\d{8})-([0-9a-f-]{36})\.zip$")


class StorageError(Exception):
    pass


class StorageFull(StorageError):
    pass


class ChunkCorrupted(StorageError):
    def __init__(self, chunk_id: str, reason: str):
        super().__init__(f"chunk {chunk_id} is corrupted: {reason}")
        self.chunk_id = chunk_id
        self.reason = reason


@dataclass(frozen=True)
class StorageConfig:
    data_dir: Path
    chunk_max_uncompressed_bytes: int = 4 * MiB
    chunk_max_age_ms: int = 900_000
    cache_flush_bytes: int = 64 * KiB
    cache_flush_interval_ms: int = 5000
    compress_level: int = 9

    def __post_init__(self):
        object.__setattr__(self, "data_dir", Path(self.data_dir))
        for name in ("chunk_max_uncompressed_bytes", "chunk_max_age_ms", "cache_flush_bytes",
                     "cache_flush_interval_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cache_flush_bytes >= self.chunk_max_uncompressed_bytes:
            raise ValueError("cache_flush_bytes must be below chunk_max_uncompressed_bytes")
        if self.cache_flush_interval_ms >= self.chunk_max_age_ms:
            raise ValueError("cache_flush_interval_ms must be below chunk_max_age_ms")


def _wrap_io(exc: OSError) -> StorageError:
    if exc.errno in (errno.ENOSPC, errno.EDQUOT):
        return StorageFull(f"storage full: {exc}")
    return StorageError(str(exc))


# ---------------------------------------------------------------- container

def build_container(manifest_fields: dict, records: bytes, blobs: dict[str, bytes],
                    compress_level: int = 9) -> tuple[bytes, ChunkManifest]:
    """Assemble chunk container bytes. ``manifest_fields`` supplies the ids and extents."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED, compresslevel=compress_level) as zf:
        zf.writestr(_entry("records.jsonl"), records)
        compressed = zf.getinfo("records.jsonl").compress_size
        for name in sorted(blobs):
            zf.writestr(_entry(f"blobs/{name}"), blobs[name])
            compressed += zf.getinfo(f"blobs/{name}").compress_size
        manifest = ChunkManifest(
            records_crc32=zlib.crc32(records),
            uncompressed_bytes=len(records) + sum(len(b) for b in blobs.values()),
            compressed_bytes=compressed,
            blob_count=len(blobs),
            **manifest_fields,
        )
        zf.writestr(_entry("manifest.json"), canonical_json(manifest.to_json()))
        zf.comment = COMMENT_PREFIX + b"0" * 8
    data = bytearray(buf.getvalue())
    body = bytes(data[:-COMMENT_LEN])
    data[-8:] = b"%08x" % zlib.crc32(body)
    return bytes(data), manifest


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp keeps containers reproducible
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o600 << 16
    return info


def parse_container(data: bytes, label: str = "?") -> tuple[ChunkManifest, list[LogRecord], dict[str, bytes]]:
    """Verify and decode chunk container bytes; raises ChunkCorrupted."""
    if len(data) < COMMENT_LEN or not data[-COMMENT_LEN:].startswith(COMMENT_PREFIX):
        raise ChunkCorrupted(label, "missing container checksum")
    try:
        expected = int(data[-8:], 16)
    except ValueError:
        raise ChunkCorrupted(label, "unreadable container checksum") from None
    if zlib.crc32(data[:-COMMENT_LEN]) != expected:
        raise ChunkCorrupted(label, "container checksum mismatch")
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            manifest = ChunkManifest.from_json(json.loads(zf.read("manifest.json")))
            label = manifest.chunk_id
            raw = zf.read("records.jsonl")
            blobs = {
                n[len("blobs/"):]: zf.read(n) for n in zf.namelist() if n.startswith("blobs/")
            }
    except ChunkCorrupted:
        raise
    except Exception as exc:
        raise ChunkCorrupted(label, f"unreadable container: {exc}") from None
    if zlib.crc32(raw) != manifest.records_crc32:
        raise ChunkCorrupted(label, "records_crc32 mismatch")
    try:
        records = [LogRecord.from_json(json.loads(line)) for line in raw.splitlines() if line]
    except Exception as exc:
        raise ChunkCorrupted(label, f"bad record line: {exc}") from None
    if len(records) != manifest.record_count:
        raise ChunkCorrupted(label, "record_count mismatch")
    if len(blobs) != manifest.blob_count:
        raise ChunkCorrupted(label, "blob_count mismatch")
    return manifest, records, blobs


def read_chunk_file(path) -> tuple[ChunkManifest, list[LogRecord], dict[str, bytes]]:
    path = Path(path)
    m = CHUNK_NAME.match(path.name)
    return parse_container(path.read_bytes(), m.group(2) if m else path.stem)


# ---------------------------------------------------------------- manager

class Storage:
    def __init__(self, config: StorageConfig, experiment_id: str, device_id: str,
                 clock=None):
        self.config = config
        self.experiment_id = experiment_id
        self.device_id = device_id
        self.clock = clock
        self.root = private_dir(config.data_dir / experiment_id / device_id)
        self._open_dir = self.root / ".open"
        self._lock = threading.RLock()
        self._cache: list[bytes] = []
        self._cache_bytes = 0
        self._open: Optional[dict] = None
        self._staged_bytes = 0
        self._last_flush_ms: Optional[int] = None
        self.total_appended = 0
        # test hook: called after the temp container is written, before rename
        self.before_rename: Optional[Callable[[Path], None]] = None
        self._recover()

    # -- recovery

    def _recover(self) -> None:
        for tmp in self.root.glob(".*.tmp"):
            tmp.unlink(missing_ok=True)
        sealed = self._sealed_files()
        next_seq = (read_json(self.root / "state.json") or {}).get("next_chunk_seq", 0)
        if sealed:
            next_seq = max(next_seq, max(seq for seq, _, _ in sealed) + 1)
        meta = read_json(self._open_dir / "meta.json")
        if meta is not None:
            if any(cid == meta["chunk_id"] for _, cid, _ in sealed):
                # crashed after rename, before staging cleanup
                shutil.rmtree(self._open_dir, ignore_errors=True)
            else:
                self._resume_open(meta)
                next_seq = max(next_seq, meta["chunk_seq"] + 1)
        self._next_chunk_seq = next_seq

    def _resume_open(self, meta: dict) -> None:
        path = self._open_dir / "records.jsonl"
        raw = path.read_bytes() if path.exists() else b""
        if raw and not raw.endswith(b"\n"):
            raw = raw[: raw.rfind(b"\n") + 1]
            atomic_write(path, raw)
        lines = [line for line in raw.splitlines() if line]
        last = LogRecord.from_json(json.loads(lines[-1])) if lines else None
        blobs = {r.blob_ref.blob_name for r in (LogRecord.from_json(json.loads(x)) for x in lines)
                 if r.blob_ref is not None}
        blob_dir = self._open_dir / "blobs"
        if blob_dir.exists():
            for f in blob_dir.iterdir():
                if f.name not in blobs:
                    f.unlink()
        self._open = dict(
            meta,
            record_count=len(lines),
            next_seq=last.seq + 1 if last else 0,
            first_ts=LogRecord.from_json(json.loads(lines[0])).ts_ms if lines else None,
            last_ts=last.ts_ms if last else None,
            blob_count=len(blobs),
        )
        self._staged_bytes = len(raw)
        logger.info("resumed open chunk %s with %d records", meta["chunk_id"], len(lines))

    def _sealed_files(self) -> list[tuple[int, str, Path]]:
        out = []
        for p in self.root.iterdir():
            m = CHUNK_NAME.match(p.name)
            if m:
                out.append((int(m.group(1)), m.group(2), p))
        return sorted(out)

    # -- writing

    def _now(self, clock) -> int:
        clock = clock or self.clock
        if clock is None:
            import time

            return int(time.time() * 1000)
        return clock.now_ms()

    def _ensure_open(self, now_ms: int) -> dict:
        if self._open is None:
            meta = {
                "chunk_id": str(uuid.uuid4()),
                "chunk_seq": self._next_chunk_seq,
                "opened_ts": now_ms,
            }
            self._next_chunk_seq += 1
            try:
                private_dir(self._open_dir)
                write_json(self._open_dir / "meta.json", meta)
                write_json(self.root / "state.json", {"next_chunk_seq": self._next_chunk_seq})
            except OSError as exc:
                raise _wrap_io(exc) from exc
            self._open = dict(meta, record_count=0, next_seq=0, first_ts=None, last_ts=None, blob_count=0)
            self._staged_bytes = 0
        return self._open

    def append(self, plugin_id: str, payload: Any = None, blob: Optional[bytes] = None,
               clock=None) -> tuple[int, int]:
        """Buffer one record; returns its (ts_ms, seq)."""
        if (payload is None) == (blob is None):
            raise ValueError("append takes exactly one of payload or blob")
        with self._lock:
            now = self._now(clock)
            chunk = self._ensure_open(now)
            ts = max(now, chunk["last_ts"] or now)
            seq = chunk["next_seq"]
            if blob is not None:
                name = f"{seq:08d}-{plugin_id}.bin"
                try:
                    blob_dir = self._open_dir / "blobs"
                    blob_dir.mkdir(exist_ok=True)
                    (blob_dir / name).write_bytes(blob)
                except OSError as exc:
                    raise _wrap_io(exc) from exc
                rec = LogRecord(ts, plugin_id, seq, PayloadKind.BLOB,
                                blob_ref=BlobRef(name, len(blob), zlib.crc32(blob)))
                chunk["blob_count"] += 1
                self._staged_bytes += len(blob)
            else:
                rec = LogRecord(ts, plugin_id, seq, PayloadKind.STRUCTURED, payload=payload)
            line = rec.to_line()
            self._cache.append(line)
            self._cache_bytes += len(line)
            chunk["next_seq"] = seq + 1
            chunk["record_count"] += 1
            chunk["last_ts"] = ts
            if chunk["first_ts"] is None:
                chunk["first_ts"] = ts
            self.total_appended += 1
            if self._last_flush_ms is None:
                self._last_flush_ms = now
            if self._cache_bytes >= self.config.cache_flush_bytes:
                self.flush()
                self._last_flush_ms = now
                if self._staged_bytes >= self.config.chunk_max_uncompressed_bytes:
                    self.seal_chunk()
            return ts, seq

    def flush(self) -> int:
        """Drain the cache into the open chunk's staging file; returns bytes written."""
        with self._lock:
            if not self._cache:
                return 0
            data = b"".join(self._cache)
            try:
                with open(self._open_dir / "records.jsonl", "ab") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise _wrap_io(exc) from exc
            self._cache.clear()
            self._cache_bytes = 0
            self._staged_bytes += len(data)
            return len(data)

    @property
    def cached_records(self) -> int:
        return len(self._cache)

    def open_record_count(self) -> int:
        return self._open["record_count"] if self._open else 0

    def tick(self, now_ms: int) -> Optional[ChunkManifest]:
        """Periodic housekeeping: time-based flush and age-based rotation."""
        with self._lock:
            if self._cache and (self._last_flush_ms is None
                                or now_ms - self._last_flush_ms >= self.config.cache_flush_interval_ms):
                self.flush()
                self._last_flush_ms = now_ms
            if self._open and self._open["record_count"] and \
                    now_ms - self._open["opened_ts"] >= self.config.chunk_max_age_ms:
                return self.seal_chunk()
        return None

    def seal_chunk(self) -> Optional[ChunkManifest]:
        with self._lock:
            if self._open is None or self._open["record_count"] == 0:
                return None
            self.flush()
            chunk = self._open
            records = (self._open_dir / "records.jsonl").read_bytes()
            blob_dir = self._open_dir / "blobs"
            blobs = {f.name: f.read_bytes() for f in blob_dir.iterdir()} if blob_dir.exists() else {}
            data, manifest = build_container(
                dict(
                    chunk_id=chunk["chunk_id"],
                    experiment_id=self.experiment_id,
                    device_id=self.device_id,
                    chunk_seq=chunk["chunk_seq"],
                    first_ts=chunk["first_ts"],
                    last_ts=chunk["last_ts"],
                    record_count=chunk["record_count"],
                ),
                records, blobs, self.config.compress_level,
            )
            final = self.root / f"{chunk['chunk_seq']:08d}-{chunk['chunk_id']}.zip"
            tmp = self.root / f".{final.name}.tmp"
            try:
                with open(tmp, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.chmod(tmp, 0o600)
                if self.before_rename is not None:
                    self.before_rename(tmp)
                os.replace(tmp, final)
                fsync_dir(self.root)
            except OSError as exc:
                raise _wrap_io(exc) from exc
            shutil.rmtree(self._open_dir, ignore_errors=True)
            self._open = None
            self._staged_bytes = 0
            return manifest

    def close(self, seal: bool = True) -> Optional[ChunkManifest]:
        with self._lock:
            if seal:
                return self.seal_chunk()
            self.flush()
            return None

    # -- reading

    def chunk_paths(self) -> list[Path]:
        return [p for _, _, p in self._sealed_files()]

    def list_chunks(self) -> list[ChunkManifest]:
        out = []
        for path in self.chunk_paths():
            try:
                with zipfile.ZipFile(path) as zf:
                    out.append(ChunkManifest.from_json(json.loads(zf.read("manifest.json"))))
            except Exception as exc:
                raise ChunkCorrupted(CHUNK_NAME.match(path.name).group(2), str(exc)) from None
        return out

    def chunk_path(self, chunk_id: str) -> Optional[Path]:
        for _, cid, p in self._sealed_files():
            if cid == chunk_id:
                return p
        return None

    def read_chunk(self, chunk_id: str) -> tuple[list[LogRecord], dict[str, bytes]]:
        path = self.chunk_path(chunk_id)
        if path is None:
            raise KeyError(chunk_id)
        _, records, blobs = read_chunk_file(path)
        return records, blobs

    def delete_chunk(self, chunk_id: str) -> bool:
        path = self.chunk_path(chunk_id)
        if path is None:
            return False
        path.unlink(missing_ok=True)
        fsync_dir(self.root)
        return True

    def quarantine_chunk(self, chunk_id: str) -> Optional[Path]:
        path = self.chunk_path(chunk_id)
        if path is None:
            return None
        qdir = private_dir(self.root / "quarantine")
        dest = qdir / path.name
        os.replace(path, dest)
        return dest

    def dump(self, dest_dir) -> list[Path]:
        """Copy every sealed chunk to ``dest_dir/<experiment>/<device>/``."""
        target = Path(dest_dir) / self.experiment_id / self.device_id
        copied, failures = [], []
        for path in self.chunk_paths():
            try:
                target.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(path, target / path.name)
                copied.append(target / path.name)
            except OSError as exc:
                failures.append((path.name, exc))
                logger.error("dump of %s failed: %s", path.name, exc)
        if failures:
            raise DumpError(copied, failures)
        return copied


class DumpError(StorageError):
    def __init__(self, copied, failures):
        super().__init__("; ".join(f"{n}: {e}" for n, e in failures))
        self.copied = copied
        self.failures = failures
