"""Experiment packaging: capability computation, package assembly and signing.

A package is a ZIP with three entries:

``manifest.json``  canonical manifest bytes
``plugins.lock``   canonical JSON ``{"plugins": [{"plugin_id", "descriptor_digest"}]}``
``signature.sig``  JSON ``{"algorithm", "key_fingerprint", "signature"}`` where the
                   signature (base64) covers manifest bytes + SHA-256(plugins.lock)
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import io
import json
import sys
import time
import uuid
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from probekit.fsutil import atomic_write, private_dir
from probekit.model import (
    Capability,
    ExperimentManifest,
    GlobalWakePolicy,
    ManifestError,
    PluginConfig,
    PluginKind,
    UploadPolicy,
    Violation,
    canonical_json,
    canonicalize_manifest,
    parse_manifest,
    validate_manifest,
)
from probekit.plugins import describe_all
from probekit.plugins.base import PluginDescriptor, UnknownPlugin

ALGORITHM = "ed25519"
PRIVATE_KEY_FILE = "signing_key.pem"
PUBLIC_KEY_FILE = "signing_key.pub.pem"


class BuildError(Exception):
    def __init__(self, violations: list[Violation]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


class PackageError(Exception):
    pass


# ---------------------------------------------------------------- keys

def fingerprint(public_key: ed25519.Ed25519PublicKey) -> str:
    raw = public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return hashlib.sha256(raw).hexdigest()


@dataclass(frozen=True)
class SigningKey:
    private_key: ed25519.Ed25519PrivateKey

    @property
    def public_key(self) -> ed25519.Ed25519PublicKey:
        return self.private_key.public_key()

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.public_key)

    @classmethod
    def generate(cls) -> "SigningKey":
        return cls(ed25519.Ed25519PrivateKey.generate())

    def public_pem(self) -> bytes:
        return self.public_key.public_bytes(
            serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
        )

    def save(self, directory) -> tuple[Path, Path]:
        directory = private_dir(directory)
        priv = directory / PRIVATE_KEY_FILE
        pub = directory / PUBLIC_KEY_FILE
        atomic_write(priv, self.private_key.private_bytes(
            serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
        ), mode=0o600)
        atomic_write(pub, self.public_pem(), mode=0o644)
        return priv, pub

    @classmethod
    def load(cls, path) -> "SigningKey":
        """Load from a PEM file or a directory written by :meth:`save`."""
        path = Path(path)
        if path.is_dir():
            path = path / PRIVATE_KEY_FILE
        key = serialization.load_pem_private_key(path.read_bytes(), password=None)
        if not isinstance(key, ed25519.Ed25519PrivateKey):
            raise PackageError(f"{path} is not an Ed25519 private key")
        return cls(key)


def load_public_key(source) -> ed25519.Ed25519PublicKey:
    """Accept PEM bytes, a PEM file, a key directory, or a key object."""
    if isinstance(source, ed25519.Ed25519PublicKey):
        return source
    if isinstance(source, SigningKey):
        return source.public_key
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.is_dir():
            path = path / PUBLIC_KEY_FILE
        source = path.read_bytes()
    key = serialization.load_pem_public_key(source)
    if not isinstance(key, ed25519.Ed25519PublicKey):
        raise PackageError("not an Ed25519 public key")
    return key


# ---------------------------------------------------------------- capabilities

def compute_capabilities(configs: Iterable[PluginConfig], registry=None) -> frozenset[Capability]:
    index = {d.plugin_id: d for d in (registry if registry is not None else describe_all())}
    caps: set[Capability] = set()
    for c in configs:
        pid = c.plugin_id if isinstance(c, PluginConfig) else c
        if pid not in index:
            raise UnknownPlugin(pid)
        caps |= index[pid].required_capabilities
    return frozenset(caps)


def list_plugins(registry=None) -> str:
    rows = [("PLUGIN", "KIND", "INTERVAL", "CAPABILITIES", "OPTIONS")]
    for d in registry if registry is not None else describe_all():
        rows.append((
            d.plugin_id,
            d.kind.value,
            f"{d.default_interval_ms} ms" if d.default_interval_ms else "-",
            ",".join(sorted(c.value for c in d.required_capabilities)),
            " ".join(s.describe() for s in d.option_schema) or "-",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = []
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(4)) + "  " + r[4])
    return "\n".join(lines) + "\n"


def descriptor_digest(d: PluginDescriptor) -> str:
    return hashlib.sha256(canonical_json(d.to_json())).hexdigest()


def make_lock(manifest: ExperimentManifest, registry=None) -> bytes:
    index = {d.plugin_id: d for d in (registry if registry is not None else describe_all())}
    entries = [
        {"plugin_id": c.plugin_id, "descriptor_digest": descriptor_digest(index[c.plugin_id])}
        for c in manifest.plugin_configs
    ]
    return canonical_json({"plugins": entries})


# ---------------------------------------------------------------- config -> manifest

def manifest_from_config(config: dict, key: SigningKey, registry=None,
                         created_ts: Optional[int] = None) -> ExperimentManifest:
    """Turn a researcher config into a validated manifest; raises BuildError with every violation."""
    registry = list(registry if registry is not None else describe_all())
    index = {d.plugin_id: d for d in registry}
    problems: list[Violation] = []
    configs = []
    for i, entry in enumerate(config.get("plugins", [])):
        pid = entry.get("plugin_id", "")
        desc = index.get(pid)
        if desc is None:
            problems.append(Violation("unknown_plugin", f"unknown plugin {pid!r}", pid))
            continue
        interval = entry.get("interval_ms")
        if desc.kind is PluginKind.POLLING and interval is None:
            interval = desc.default_interval_ms
        try:
            configs.append(PluginConfig.from_json({
                "plugin_id": pid,
                "kind": desc.kind.value,
                "options": entry.get("options", {}),
                **({"interval_ms": interval} if interval is not None else {}),
            }))
        except ManifestError as exc:
            problems.append(Violation("bad_plugin_config", str(exc), pid))
    if not config.get("plugins"):
        problems.append(Violation("no_plugins", "select at least one plugin"))
    if problems:
        raise BuildError(problems)

    required = compute_capabilities(configs, registry)
    declared = config.get("capabilities")
    try:
        caps = frozenset(Capability.parse(c) for c in declared) if declared is not None else required
        manifest = ExperimentManifest(
            experiment_id=config.get("experiment_id") or str(uuid.uuid4()),
            name=config.get("name", ""),
            version=str(config.get("version", "1.0")),
            author_name=config.get("author_name", ""),
            author_key_fingerprint=key.fingerprint,
            description=config.get("description", ""),
            created_ts=created_ts or int(time.time() * 1000),
            plugin_configs=tuple(configs),
            capabilities=caps,
            wake_policy=GlobalWakePolicy.from_json(config.get("wake_policy", {})),
            upload_policy=UploadPolicy.from_json(config.get("upload_policy", {})),
        )
    except ManifestError as exc:
        raise BuildError([Violation("bad_config", str(exc))]) from None
    violations = validate_manifest(manifest, registry)
    if violations:
        raise BuildError(violations)
    return manifest


# ---------------------------------------------------------------- package

def _signed_message(manifest_bytes: bytes, lock_bytes: bytes) -> bytes:
    return manifest_bytes + hashlib.sha256(lock_bytes).digest()


def sign_package(manifest_bytes: bytes, lock_bytes: bytes, key: SigningKey) -> bytes:
    sig = key.private_key.sign(_signed_message(manifest_bytes, lock_bytes))
    return canonical_json({
        "algorithm": ALGORITHM,
        "key_fingerprint": key.fingerprint,
        "signature": base64.b64encode(sig).decode("ascii"),
    })


def assemble_package(manifest: ExperimentManifest, key: Optional[SigningKey], registry=None) -> bytes:
    manifest_bytes = canonicalize_manifest(manifest)
    lock_bytes = make_lock(manifest, registry)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in (("manifest.json", manifest_bytes), ("plugins.lock", lock_bytes)):
            zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)
        if key is not None:
            zf.writestr(zipfile.ZipInfo("signature.sig", date_time=(1980, 1, 1, 0, 0, 0)),
                        sign_package(manifest_bytes, lock_bytes, key))
    return buf.getvalue()


def build(config_file, key: SigningKey, out, registry=None, created_ts: Optional[int] = None) -> "Package":
    config = json.loads(Path(config_file).read_text(encoding="utf-8"))
    manifest = manifest_from_config(config, key, registry, created_ts)
    data = assemble_package(manifest, key, registry)
    atomic_write(out, data, mode=0o644)
    return Package.from_bytes(data)


@dataclass(frozen=True)
class Package:
    manifest_bytes: bytes
    lock_bytes: bytes
    signature_bytes: Optional[bytes]
    raw: bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> "Package":
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                names = set(zf.namelist())
                if not {"manifest.json", "plugins.lock"} <= names:
                    raise PackageError("package lacks manifest.json or plugins.lock")
                sig = zf.read("signature.sig") if "signature.sig" in names else None
                return cls(zf.read("manifest.json"), zf.read("plugins.lock"), sig, data)
        except PackageError:
            raise
        except Exception as exc:
            raise PackageError(f"malformed package: {exc}") from None

    @classmethod
    def load(cls, path) -> "Package":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def manifest(self) -> ExperimentManifest:
        return parse_manifest(self.manifest_bytes)

    @property
    def lock(self) -> list[dict]:
        return json.loads(self.lock_bytes)["plugins"]

    def signature_info(self) -> Optional[dict]:
        if self.signature_bytes is None:
            return None
        return json.loads(self.signature_bytes)


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    reason: str
    key_fingerprint: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def verify_package(pkg, public_key) -> VerifyResult:
    """Check the detached signature and the package's internal consistency."""
    try:
        if not isinstance(pkg, Package):
            pkg = Package.from_bytes(pkg) if isinstance(pkg, bytes) else Package.load(pkg)
    except (PackageError, OSError) as exc:
        return VerifyResult(False, f"malformed: {exc}")
    if pkg.signature_bytes is None:
        return VerifyResult(False, "unsigned")
    try:
        info = pkg.signature_info()
        sig = base64.b64decode(info["signature"], validate=True)
        algo, signer = info["algorithm"], info["key_fingerprint"]
    except Exception:
        return VerifyResult(False, "malformed signature")
    if algo != ALGORITHM:
        return VerifyResult(False, f"unsupported algorithm {algo!r}")
    key = load_public_key(public_key)
    fp = fingerprint(key)
    if signer != fp:
        return VerifyResult(False, "key mismatch", signer)
    try:
        key.verify(sig, _signed_message(pkg.manifest_bytes, pkg.lock_bytes))
    except InvalidSignature:
        return VerifyResult(False, "bad signature", signer)
    try:
        manifest = pkg.manifest
        lock_ids = [e["plugin_id"] for e in pkg.lock]
    except Exception as exc:
        return VerifyResult(False, f"malformed contents: {exc}", signer)
    if canonicalize_manifest(manifest) != pkg.manifest_bytes:
        return VerifyResult(False, "non-canonical manifest", signer)
    if manifest.author_key_fingerprint != fp:
        return VerifyResult(False, "author fingerprint does not match signing key", signer)
    if lock_ids != [c.plugin_id for c in manifest.plugin_configs]:
        return VerifyResult(False, "plugins.lock does not match manifest", signer)
    return VerifyResult(True, "ok", signer)



# ---------------------------------------------------------------- CLI

def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="probekit-build", description="Assemble and sign experiment packages.")
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("list-plugins", help="show the plugins an experiment can use")
    k = sub.add_parser("keygen", help="create an Ed25519 signing key pair")
    k.add_argument("--out", required=True, help="directory for the key files")
    b = sub.add_parser("build", help="build a signed package from a JSON config")
    b.add_argument("--config", required=True)
    b.add_argument("--key", required=True, help="private key file or key directory")
    b.add_argument("--out", required=True)
    v = sub.add_parser("verify", help="check a package signature")
    v.add_argument("--pkg", required=True)
    v.add_argument("--pubkey", required=True)
    args = p.parse_args(argv)

    if args.cmd == "list-plugins":
        print(list_plugins())
        return 0
    if args.cmd == "keygen":
        key = SigningKey.generate()
        priv, pub = key.save(args.out)
        print(f"private key: {priv}\npublic key:  {pub}\nfingerprint: {key.fingerprint}")
        return 0
    if args.cmd == "build":
        try:
            pkg = build(args.config, SigningKey.load(args.key), args.out)
        except BuildError as exc:
            for v in exc.violations:
                print(f"error: {v}", file=sys.stderr)
            return 1
        except (OSError, ValueError, PackageError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        m = pkg.manifest
        print(f"built {args.out}: {m.name} {m.version} ({m.experiment_id})")
        print(f"capabilities: {', '.join(sorted(c.value for c in m.capabilities))}")
        return 0
    try:
        result = verify_package(args.pkg, args.pubkey)
    except (OSError, ValueError, PackageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(result.reason if result.ok else f"FAILED: {result.reason}")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
