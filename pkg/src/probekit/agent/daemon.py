"""Agent daemon: localhost control channel plus background pump and uploader."""

from __future__ import annotations

import hmac
import json
import logging
import os
import secrets
import signal
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from probekit.agent.core import Agent, AgentError
from probekit.fsutil import atomic_write, read_json, write_json
from probekit.scheduler import SchedulerError
from probekit.storage import StorageError

logger = logging.getLogger(__name__)

TOKEN_HEADER = "X-Probekit-Token"
TOKEN_BYTES = 32


class ControlError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def token_path(home) -> Path:
    env = os.environ.get("PROBEKIT_TOKEN_FILE")
    return Path(env) if env else Path(home) / "control.token"


def load_or_create_token(path) -> str:
    """256-bit control token in an owner-only file."""
    path = Path(path)
    if path.exists():
        token = path.read_text().strip()
        if token:
            os.chmod(path, 0o600)
            return token
    token = secrets.token_hex(TOKEN_BYTES)
    atomic_write(path, token.encode() + b"\n", mode=0o600)
    return token


def dispatch(agent: Agent, request: dict) -> dict:
    cmd = request.get("command")
    eid = request.get("experiment_id")
    if cmd == "ping":
        return {"ok": True}
    if cmd == "list":
        return {"experiments": [
            {"experiment_id": r.experiment_id, "name": r.manifest.name, "version": r.version,
             "running": r.running, "origin": r.origin}
            for r in agent.list()
        ]}
    if not eid:
        raise ControlError(400, "experiment_id required")
    if cmd == "start":
        return agent.start(eid).to_json()
    if cmd == "stop":
        return agent.stop(eid).to_json()
    if cmd == "status":
        return agent.status(eid).to_json()
    if cmd == "info":
        return agent.info(eid)
    if cmd == "upload":
        return agent.upload_now(eid).to_json()
    if cmd == "dump":
        dest = request.get("dest")
        if not dest:
            raise ControlError(400, "dest required")
        return {"files": [str(p) for p in agent.dump(eid, dest)]}
    raise ControlError(400, f"unknown command {cmd!r}")


class _ControlHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("control: " + fmt, *args)

    def _reply(self, status: int, obj) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length > 0 else b""
        supplied = self.headers.get(TOKEN_HEADER, "")
        if not hmac.compare_digest(supplied.encode(), self.server.token.encode()):
            return self._reply(401, {"error": "missing or wrong control token"})
        if self.path != "/control":
            return self._reply(404, {"error": "not found"})
        try:
            request = json.loads(raw or b"{}")
            return self._reply(200, dispatch(self.server.agent, request))
        except ControlError as exc:
            return self._reply(exc.status, {"error": str(exc)})
        except KeyError as exc:
            return self._reply(404, {"error": str(exc)})
        except (AgentError, SchedulerError, StorageError, ValueError) as exc:
            return self._reply(409, {"error": str(exc)})


class ControlServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, agent: Agent, token: str, port: int = 0):
        super().__init__(("127.0.0.1", port), _ControlHandler)
        self.agent = agent
        self.token = token


class Daemon:
    def __init__(self, agent: Agent, port: int = 0, pump_interval_s: float = 0.5,
                 upload_check_s: Optional[float] = None):
        self.agent = agent
        self.token = load_or_create_token(token_path(agent.home))
        self.server = ControlServer(agent, self.token, port)
        self.pump_interval_s = pump_interval_s
        self.upload_check_s = upload_check_s or float(agent.config.get("upload_check_s", 60))
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def _upload_loop(self) -> None:
        while not self._stop.wait(self.upload_check_s):
            try:
                self.agent.upload_due()
            except Exception:
                logger.exception("background upload pass failed")

    def start(self) -> "Daemon":
        restored = self.agent.restore_running()
        if restored:
            logger.info("restored %s", ", ".join(restored))
        clock = self.agent._clock()
        self.agent.bus.start_pumping(self.pump_interval_s, clock.now_ms)
        for target, name in ((self.server.serve_forever, "control"), (self._upload_loop, "uploader")):
            t = threading.Thread(target=target, name=f"probekit-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        write_json(self.agent.home / "daemon.json", {"port": self.port, "pid": os.getpid()})
        return self

    def shutdown(self) -> None:
        self._stop.set()
        self.server.shutdown()
        self.server.server_close()
        self.agent.bus.stop_pumping()
        self.agent.shutdown()
        (self.agent.home / "daemon.json").unlink(missing_ok=True)

    def run_forever(self) -> None:
        done = threading.Event()
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: done.set())
        print(f"probekit agent listening on 127.0.0.1:{self.port}", flush=True)
        done.wait()
        self.shutdown()


def send_command(home, request: dict, token: Optional[str] = None, timeout: float = 60.0) -> tuple[int, dict]:
    """Send one control request to the daemon running for ``home``."""
    info = read_json(Path(home) / "daemon.json")
    if not info:
        raise ConnectionError("agent daemon is not running")
    if token is None:
        path = token_path(home)
        token = path.read_text().strip() if path.exists() else ""
    req = urllib.request.Request(
        f"http://127.0.0.1:{info['port']}/control", data=json.dumps(request).encode(), method="POST",
        headers={"Content-Type": "application/json", TOKEN_HEADER: token},
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"{}")
    except urllib.error.URLError as exc:
        raise ConnectionError(f"agent daemon unreachable: {exc.reason}") from None
