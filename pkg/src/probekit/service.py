"""Self-hosted collection service: experiment distribution and chunk ingestion.

Store layout under ``root``::

    experiments/<experiment_id>/<version>.pkg
    data/<experiment_id>/<device_id>/<chunk_id>.zip
    index.json          received chunk ids (rebuilt from data/ at startup)

An upload is acknowledged with 200 only after the chunk file and its
directory entry have been fsynced.
"""

from __future__ import annotations

import argparse
import errno
import hmac
import json
import logging
import os
import re
import sys
import tempfile
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from probekit.builder import Package, PackageError
from probekit.fsutil import fsync_dir, write_json
from probekit.model import ManifestError, version_key
from probekit.storage import ChunkCorrupted, parse_container

logger = logging.getLogger(__name__)

_UUID = r"[0-9a-fA-F-]{36}"
_DATA = re.compile(rf"^/v1/data/({_UUID})/({_UUID})/({_UUID})$")
_EXPERIMENT = re.compile(rf"^/v1/experiments/({_UUID})$")
_VERSION = re.compile(r"^[A-Za-z0-9._-]{1,64}$")
MAX_BODY = 512 * 1024 * 1024


class StoreFull(Exception):
    pass


class Conflict(Exception):
    pass


class ServerStore:
    def __init__(self, root):
        self.root = Path(root)
        (self.root / "experiments").mkdir(parents=True, exist_ok=True)
        (self.root / "data").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: set[str] = set()
        self._rebuild_index()

    def _rebuild_index(self) -> None:
        for tmp in self.root.rglob(".*.tmp"):
            tmp.unlink(missing_ok=True)
        self._index = {p.stem for p in (self.root / "data").glob("*/*/*.zip")}
        self._write_index()

    def _write_index(self) -> None:
        write_json(self.root / "index.json", {"chunk_ids": sorted(self._index)}, mode=0o644)

    def _durable_write(self, target: Path, data: bytes) -> Path:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            Path(tmp).unlink(missing_ok=True)
            if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                raise StoreFull(str(exc)) from exc
            raise
        return Path(tmp)

    # -- chunks

    def has_chunk(self, chunk_id: str) -> bool:
        with self._lock:
            return chunk_id in self._index

    def chunk_count(self) -> int:
        with self._lock:
            return len(self._index)

    def chunk_path(self, experiment_id: str, device_id: str, chunk_id: str) -> Path:
        return self.root / "data" / experiment_id / device_id / f"{chunk_id}.zip"

    def put_chunk(self, experiment_id: str, device_id: str, chunk_id: str, body: bytes) -> bool:
        """Store one verified chunk. Returns False if it was already present."""
        manifest, _, _ = parse_container(body, chunk_id)
        if (manifest.experiment_id, manifest.device_id, manifest.chunk_id) != (experiment_id, device_id, chunk_id):
            raise ValueError("chunk manifest ids do not match the upload path")
        if self.has_chunk(chunk_id):
            return False
        target = self.chunk_path(experiment_id, device_id, chunk_id)
        tmp = self._durable_write(target, body)
        with self._lock:
            if chunk_id in self._index:
                tmp.unlink(missing_ok=True)
                return False
            os.replace(tmp, target)
            fsync_dir(target.parent)
            self._index.add(chunk_id)
            self._write_index()
        return True

    # -- experiments

    def publish(self, data: bytes) -> dict:
        pkg = Package.from_bytes(data)
        info = pkg.signature_info()
        if info is None or not {"algorithm", "key_fingerprint", "signature"} <= info.keys():
            raise PackageError("package signature missing or unparseable")
        manifest = pkg.manifest
        if not _VERSION.match(manifest.version):
            raise PackageError(f"unsupported version string {manifest.version!r}")
        target = self.root / "experiments" / manifest.experiment_id / f"{manifest.version}.pkg"
        tmp = self._durable_write(target, data)
        with self._lock:
            if target.exists():
                tmp.unlink(missing_ok=True)
                raise Conflict(f"{manifest.experiment_id} version {manifest.version} already published")
            os.replace(tmp, target)
            fsync_dir(target.parent)
        return _entry(pkg)

    def _packages(self):
        for path in sorted((self.root / "experiments").glob("*/*.pkg")):
            try:
                yield path, Package.load(path)
            except (PackageError, ManifestError) as exc:
                logger.warning("skipping unreadable package %s: %s", path, exc)

    def list_experiments(self) -> list[dict]:
        return [_entry(pkg) for _, pkg in self._packages()]

    def experiment_count(self) -> int:
        return len(list((self.root / "experiments").glob("*/*.pkg")))

    def package_path(self, experiment_id: str, version: Optional[str] = None) -> Optional[Path]:
        d = self.root / "experiments" / experiment_id
        if version is not None:
            p = d / f"{version}.pkg"
            return p if _VERSION.match(version) and p.exists() else None
        candidates = sorted(d.glob("*.pkg"), key=lambda p: version_key(p.stem))
        return candidates[-1] if candidates else None


def _entry(pkg: Package) -> dict:
    m = pkg.manifest
    return {
        "experiment_id": m.experiment_id,
        "name": m.name,
        "version": m.version,
        "author": m.author_name,
        "fingerprint": m.author_key_fingerprint,
    }


class Handler(BaseHTTPRequestHandler):
    server_version = "probekit-server/0.1"
    protocol_version = "HTTP/1.1"

    @property
    def store(self) -> ServerStore:
        return self.server.store

    def log_message(self, fmt, *args):
        logger.info("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, ctype: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode())

    def _error(self, status: int, message: str) -> None:
        self._json(status, {"error": message})

    def _authorized(self) -> bool:
        header = self.headers.get("Authorization", "")
        token = header[len("Bearer "):] if header.startswith("Bearer ") else ""
        return bool(self.server.token) and hmac.compare_digest(token.encode(), self.server.token.encode())

    def _body(self) -> Optional[bytes]:
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self._error(HTTPStatus.LENGTH_REQUIRED, "Content-Length required")
            return None
        if length < 0 or length > MAX_BODY:
            self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, "body too large")
            return None
        return self.rfile.read(length)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/v1/health":
            return self._json(200, {
                "status": "ok",
                "chunks_stored": self.store.chunk_count(),
                "experiments_published": self.store.experiment_count(),
            })
        if url.path == "/v1/experiments":
            return self._json(200, self.store.list_experiments())
        m = _EXPERIMENT.match(url.path)
        if m:
            version = parse_qs(url.query).get("version", [None])[0]
            path = self.store.package_path(m.group(1), version)
            if path is None:
                return self._error(404, "unknown experiment")
            return self._send(200, path.read_bytes(), "application/zip")
        self._error(404, "not found")

    def do_POST(self):
        url = urlparse(self.path)
        body = self._body()
        if body is None:
            return
        if not self._authorized():
            return self._error(401, "bad or missing bearer token")
        if url.path == "/v1/experiments":
            try:
                entry = self.store.publish(body)
            except Conflict as exc:
                return self._error(409, str(exc))
            except StoreFull as exc:
                return self._error(507, str(exc))
            except (PackageError, ManifestError, ValueError, KeyError) as exc:
                return self._error(400, f"malformed package: {exc}")
            return self._json(201, entry)
        m = _DATA.match(url.path)
        if m:
            exp, dev, chunk = m.groups()
            try:
                stored = self.store.put_chunk(exp, dev, chunk, body)
            except ChunkCorrupted as exc:
                return self._error(400, str(exc))
            except ValueError as exc:
                return self._error(400, str(exc))
            except StoreFull as exc:
                return self._error(507, str(exc))
            return self._json(200, {"chunk_id": chunk, "stored": True, "duplicate": not stored})
        self._error(404, "not found")


class CollectionServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, store: ServerStore, token: str):
        super().__init__(address, Handler)
        self.store = store
        self.token = token

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def make_server(root, host: str = "127.0.0.1", port: int = 0, token: str = "") -> CollectionServer:
    return CollectionServer((host, port), ServerStore(root), token)


def serve_in_thread(server: CollectionServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, name="probekit-server", daemon=True)
    t.start()
    return t


def _parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="probekit-server", description="Run the probekit collection service.")
    p.add_argument("--root", required=True, help="store directory")
    p.add_argument("--listen", default="127.0.0.1:8750", help="host:port (default %(default)s)")
    p.add_argument("--token-file", required=True, help="file holding the bearer token")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    token = Path(args.token_file).read_text().strip()
    if not token:
        p.error("token file is empty")
    host, port = _parse_listen(args.listen)
    server = make_server(args.root, host, port, token)
    print(f"listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
