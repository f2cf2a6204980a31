"""Log viewer: select chunks, merge their records, export CSV, reassemble blobs.

Chunks are discovered under any number of roots, in either the agent layout
(``<exp>/<dev>/<seq>-<chunk_id>.zip``) or the collection service layout
(``data/<exp>/<dev>/<chunk_id>.zip``).  A chunk found under several roots is
read once.  Records from different devices are merged on their raw device
timestamps; clock skew between devices is not corrected.
"""

from __future__ import annotations

import argparse
import csv
import enum
import json
import logging
import re
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from probekit.model import ChunkManifest, LogRecord, PayloadKind
from probekit.storage import CHUNK_NAME, ChunkCorrupted, read_chunk_file

logger = logging.getLogger(__name__)

_SERVER_NAME = re.compile(r"^([0-9a-f-]{36})\.zip$")


class Scope(str, enum.Enum):
    CHUNK = "chunk"
    DEVICE = "device"
    EXPERIMENT = "experiment"


@dataclass(frozen=True)
class Selector:
    scope: Scope
    experiment_id: str
    roots: tuple[Path, ...]
    device_id: Optional[str] = None
    chunk_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "scope", Scope(self.scope))
        object.__setattr__(self, "roots", tuple(Path(r) for r in self.roots))
        if self.scope is Scope.CHUNK and not self.chunk_id:
            raise ValueError("chunk scope needs a chunk_id")
        if self.scope is Scope.DEVICE and not self.device_id:
            raise ValueError("device scope needs a device_id")
        if not self.roots:
            raise ValueError("at least one source root is required")

    @classmethod
    def build(cls, experiment_id: str, roots: Sequence, device_id: Optional[str] = None,
              chunk_id: Optional[str] = None) -> "Selector":
        scope = Scope.CHUNK if chunk_id else Scope.DEVICE if device_id else Scope.EXPERIMENT
        return cls(scope, experiment_id, tuple(roots), device_id, chunk_id)

    def wants_path(self, path: Path) -> bool:
        parts = path.parts
        if self.experiment_id not in parts:
            return False
        if self.device_id and self.device_id not in parts:
            return False
        return not self.chunk_id or _chunk_id_of(path) == self.chunk_id

    def wants(self, m: ChunkManifest) -> bool:
        return (m.experiment_id == self.experiment_id
                and (self.device_id is None or m.device_id == self.device_id)
                and (self.chunk_id is None or m.chunk_id == self.chunk_id))


def _chunk_id_of(path: Path) -> Optional[str]:
    m = CHUNK_NAME.match(path.name) or _SERVER_NAME.match(path.name)
    return m.groups()[-1] if m else None


@dataclass(frozen=True)
class MergedRecord:
    device_id: str
    chunk_id: str
    chunk_seq: int
    record: LogRecord
    blob: Optional[bytes] = None

    @property
    def sort_key(self) -> tuple:
        r = self.record
        return (r.ts_ms, self.device_id, r.plugin_id, r.seq, self.chunk_seq)

    def to_json(self) -> dict:
        return {**self.record.to_json(), "device_id": self.device_id, "chunk_id": self.chunk_id}


@dataclass
class MergeResult:
    records: list[MergedRecord]
    chunks: list[ChunkManifest]
    problems: list[str] = field(default_factory=list)


def discover(selector: Selector) -> list[Path]:
    found = []
    for root in selector.roots:
        if root.is_file():
            found.append(root)
            continue
        for p in root.rglob("*.zip"):
            if _chunk_id_of(p) and selector.wants_path(p.resolve()):
                found.append(p)
    return sorted(set(found))


def _load(path: Path):
    try:
        return path, read_chunk_file(path), None
    except ChunkCorrupted as exc:
        return path, None, exc
    except OSError as exc:
        return path, None, ChunkCorrupted(_chunk_id_of(path) or path.name, f"unreadable: {exc}")


def merge(selector: Selector, skip_corrupt: bool = False, workers: int = 4) -> MergeResult:
    """Read every selected chunk once and order records by (ts, device, plugin, seq)."""
    paths = discover(selector)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = list(pool.map(_load, paths))
    seen: set[tuple[str, str]] = set()
    records: list[MergedRecord] = []
    chunks: list[ChunkManifest] = []
    problems: list[str] = []
    for path, content, err in loaded:
        if err is not None:
            msg = f"{path}: {err}"
            if not skip_corrupt:
                raise ChunkCorrupted(err.chunk_id, f"{err.reason} ({path})")
            logger.warning("skipping corrupt chunk %s", msg)
            problems.append(msg)
            continue
        manifest, recs, blobs = content
        if not selector.wants(manifest):
            continue
        key = (manifest.device_id, manifest.chunk_id)
        if key in seen:
            continue
        seen.add(key)
        chunks.append(manifest)
        for r in recs:
            blob = blobs.get(r.blob_ref.blob_name) if r.blob_ref else None
            records.append(MergedRecord(manifest.device_id, manifest.chunk_id, manifest.chunk_seq, r, blob))
    records.sort(key=lambda m: m.sort_key)
    chunks.sort(key=lambda m: (m.device_id, m.chunk_seq, m.chunk_id))
    return MergeResult(records, chunks, problems)


# ---------------------------------------------------------------- preview

def _summary(rec: MergedRecord, width: int = 72) -> str:
    r = rec.record
    if r.payload_kind is PayloadKind.BLOB:
        return f"<blob {r.blob_ref.blob_name}, {r.blob_ref.byte_len} bytes>"
    text = json.dumps(r.payload, sort_keys=True, separators=(",", ":"))
    return text if len(text) <= width else text[: width - 3] + "..."


def preview(selector: Selector, limit: int = 20, skip_corrupt: bool = False) -> str:
    result = merge(selector, skip_corrupt)
    devices = {c.device_id for c in result.chunks}
    lines = [f"experiment {selector.experiment_id}: {len(result.records)} records, "
             f"{len(result.chunks)} chunks, {len(devices)} devices"]
    lines += [f"! {p}" for p in result.problems]
    for m in result.records[:limit]:
        r = m.record
        lines.append(f"{r.ts_ms}  {m.device_id[:8]}  {r.plugin_id:<14} {r.seq:>8}  {_summary(m)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- CSV

def flatten(payload: Any, prefix: str = "") -> dict[str, Any]:
    """Dot-join nested mapping keys; non-mapping payloads land in a ``value`` column."""
    if not isinstance(payload, dict):
        return {prefix or "value": payload}
    out: dict[str, Any] = {}
    for k, v in payload.items():
        name = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict) and v:
            out.update(flatten(v, name))
        else:
            out[name] = v
    return out


def cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def _row_values(m: MergedRecord) -> dict[str, Any]:
    r = m.record
    if r.payload_kind is PayloadKind.BLOB:
        return r.blob_ref.to_json()
    return flatten(r.payload)


def export_csv(selector: Selector, out_dir, skip_corrupt: bool = False,
               result: Optional[MergeResult] = None) -> list[Path]:
    result = result or merge(selector, skip_corrupt)
    by_plugin: dict[str, list[tuple[MergedRecord, dict]]] = {}
    for m in result.records:
        by_plugin.setdefault(m.record.plugin_id, []).append((m, _row_values(m)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for plugin_id in sorted(by_plugin):
        rows = by_plugin[plugin_id]
        columns: dict[str, None] = {}
        for _, values in rows:
            columns.update(dict.fromkeys(values))
        header = ["ts_ms", "device_id", "seq"] + list(columns)
        path = out_dir / f"{plugin_id}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for m, values in rows:
                w.writerow([m.record.ts_ms, m.device_id, m.record.seq] + [cell(values.get(c)) for c in columns])
        written.append(path)
    return written


# ---------------------------------------------------------------- blobs

@dataclass
class BlobExport:
    files: list[Path]
    streams: list[Path]
    errors: list[str]


def extract_blobs(selector: Selector, out_dir, skip_corrupt: bool = False,
                  result: Optional[MergeResult] = None) -> BlobExport:
    result = result or merge(selector, skip_corrupt)
    out_dir = Path(out_dir)
    files, errors = [], []
    streams: dict[Path, list[bytes]] = {}
    for m in result.records:
        ref = m.record.blob_ref
        if ref is None:
            continue
        r = m.record
        label = f"{r.plugin_id}/{m.device_id}/{r.ts_ms}-{r.seq}"
        if m.blob is None:
            errors.append(f"{label}: blob {ref.blob_name} missing from chunk {m.chunk_id}")
            continue
        if len(m.blob) != ref.byte_len or zlib.crc32(m.blob) != ref.content_crc32:
            errors.append(f"{label}: blob {ref.blob_name} fails its checksum")
            continue
        path = out_dir / r.plugin_id / m.device_id / f"{r.ts_ms}-{r.seq}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(m.blob)
        files.append(path)
        streams.setdefault(out_dir / r.plugin_id / f"{m.device_id}.stream", []).append(m.blob)
    for path, parts in streams.items():
        path.write_bytes(b"".join(parts))
    return BlobExport(files, sorted(streams), errors)


# ---------------------------------------------------------------- CLI

def write_merged(result: MergeResult, fh) -> int:
    for m in result.records:
        fh.write(json.dumps(m.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    return len(result.records)


def main(argv: Optional[Iterable[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="probekit-view", description="Inspect and convert collected chunks.")
    p.add_argument("command", choices=["preview", "merge", "csv", "blobs"])
    p.add_argument("--experiment", required=True)
    p.add_argument("--device")
    p.add_argument("--chunk")
    p.add_argument("--root", action="append", required=True, type=Path, help="source directory, repeatable")
    p.add_argument("--out", type=Path, help="output directory (merge writes merged.jsonl, else stdout)")
    p.add_argument("--limit", type=int, default=20, help="records shown by preview")
    p.add_argument("--skip-corrupt", action="store_true", help="report corrupt chunks and carry on")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")

    try:
        sel = Selector.build(args.experiment, args.root, args.device, args.chunk)
        if args.command == "preview":
            print(preview(sel, args.limit, args.skip_corrupt))
            return 0
        if args.command != "merge" and args.out is None:
            p.error(f"{args.command} needs --out")
        result = merge(sel, args.skip_corrupt)
        for prob in result.problems:
            print(f"warning: {prob}", file=sys.stderr)
        if args.command == "merge":
            if args.out is None:
                write_merged(result, sys.stdout)
            else:
                args.out.mkdir(parents=True, exist_ok=True)
                with (args.out / "merged.jsonl").open("w", encoding="utf-8") as fh:
                    n = write_merged(result, fh)
                print(f"{n} records -> {args.out / 'merged.jsonl'}")
        elif args.command == "csv":
            for path in export_csv(sel, args.out, result=result):
                print(path)
        else:
            export = extract_blobs(sel, args.out, result=result)
            for path in export.files + export.streams:
                print(path)
            for err in export.errors:
                print(f"error: {err}", file=sys.stderr)
            return 1 if export.errors else 0
    except (ChunkCorrupted, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
