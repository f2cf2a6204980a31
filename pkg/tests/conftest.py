import io
import json
import uuid
import zipfile
import zlib
from pathlib import Path

import pytest

from probekit.builder import SigningKey, assemble_package, manifest_from_config
from probekit.model import (
    Capability,
    ExperimentManifest,
    GlobalWakePolicy,
    PluginConfig,
    PluginKind,
    UploadPolicy,
)
from probekit.plugins import describe_all
from probekit.scheduler import SimulatedClock
from probekit.service import make_server, serve_in_thread
from probekit.storage import COMMENT_LEN, COMMENT_PREFIX

TOKEN = "test-token-0123456789"


@pytest.fixture(scope="session")
def registry():
    return describe_all()


@pytest.fixture(scope="session")
def key():
    return SigningKey.generate()


@pytest.fixture
def clock():
    return SimulatedClock()


def polling(pid, interval, **options):
    return PluginConfig(pid, PluginKind.POLLING, interval, options)


def event(pid, **options):
    return PluginConfig(pid, PluginKind.EVENT, None, options)


def make_manifest(configs, registry, *, caps=None, wake=None, upload=None, version="1.0",
                  fingerprint="00" * 32, experiment_id=None):
    index = {d.plugin_id: d for d in registry}
    if caps is None:
        caps = frozenset().union(*(index[c.plugin_id].required_capabilities for c in configs))
    return ExperimentManifest(
        experiment_id=experiment_id or str(uuid.uuid4()),
        name="test",
        version=version,
        author_name="lab",
        author_key_fingerprint=fingerprint,
        description="",
        created_ts=1_700_000_000_000,
        plugin_configs=tuple(configs),
        capabilities=frozenset(caps),
        wake_policy=wake or GlobalWakePolicy(),
        upload_policy=upload or UploadPolicy(),
    )


def config_dict(plugins, **extra):
    cfg = {"name": "demo", "version": "1.0", "author_name": "lab", "description": "test experiment",
           "plugins": plugins}
    cfg.update(extra)
    return cfg


def package_bytes(config, key, registry=None):
    return assemble_package(manifest_from_config(config, key, registry), key, registry)


def write_package(tmp_path: Path, config, key, name="exp.pkg") -> Path:
    path = tmp_path / name
    path.write_bytes(package_bytes(config, key))
    return path


def write_pubkey(tmp_path: Path, key, name="author.pub.pem") -> Path:
    path = tmp_path / name
    path.write_bytes(key.public_pem())
    return path


@pytest.fixture
def server(tmp_path):
    srv = make_server(tmp_path / "server", token=TOKEN)
    serve_in_thread(srv)
    yield srv
    srv.shutdown()
    srv.server_close()


def reseal(members: dict) -> bytes:
    """Build a container with a valid outer checksum around arbitrary members."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in members.items():
            zf.writestr(name, data)
        zf.comment = COMMENT_PREFIX + b"0" * 8
    data = bytearray(buf.getvalue())
    data[-8:] = b"%08x" % zlib.crc32(bytes(data[:-COMMENT_LEN]))
    return bytes(data)


def read_json(path):
    return json.loads(Path(path).read_text())


__all__ = ["Capability"]


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
