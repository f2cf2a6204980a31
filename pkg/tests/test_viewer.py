import csv
import json
import os
import random
import shutil
import uuid
import zipfile

import pytest

from conftest import reseal
from probekit.scheduler import SimulatedClock
from probekit.storage import ChunkCorrupted, Storage, StorageConfig
from probekit.viewer import Selector, cell, export_csv, extract_blobs, flatten, main, merge, preview

EXP = str(uuid.uuid4())


def device_storage(root, dev=None, start=1_700_000_000_000):
    return Storage(StorageConfig(root), EXP, dev or str(uuid.uuid4()), SimulatedClock(start))


def fill(st, n, plugins=("a", "b"), step=7, chunks=1, rng=None):
    rng = rng or random.Random(0)
    out = []
    for _ in range(chunks):
        for i in range(n):
            st.clock.advance(rng.choice([0, step]))
            pid = rng.choice(plugins)
            payload = {"i": i, "x": rng.random(), "nested": {"k": rng.randint(0, 9)}}
            st.append(pid, payload)
            out.append((pid, payload))
        st.seal_chunk()
    return out


def test_two_device_merge_order(tmp_path):
    a = device_storage(tmp_path / "d")
    b = device_storage(tmp_path / "d", start=1_700_000_000_003)
    fill(a, 200, chunks=3, rng=random.Random(1))
    fill(b, 200, chunks=2, rng=random.Random(2))
    res = merge(Selector.build(EXP, [tmp_path / "d"]))
    assert len(res.records) == 1000 and len(res.chunks) == 5
    keys = [(m.record.ts_ms, m.device_id, m.record.plugin_id, m.record.seq) for m in res.records]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_scopes(tmp_path):
    a, b = device_storage(tmp_path / "d"), device_storage(tmp_path / "d")
    fill(a, 10, chunks=2)
    fill(b, 10)
    chunk = a.list_chunks()[1]
    assert len(merge(Selector.build(EXP, [tmp_path / "d"], a.device_id)).records) == 20
    one = merge(Selector.build(EXP, [tmp_path / "d"], chunk_id=chunk.chunk_id))
    assert [c.chunk_id for c in one.chunks] == [chunk.chunk_id] and len(one.records) == 10
    assert merge(Selector.build(str(uuid.uuid4()), [tmp_path / "d"])).records == []
    with pytest.raises(ValueError):
        Selector("device", EXP, (tmp_path,))


def test_dedup_across_roots_and_layouts(tmp_path):
    st = device_storage(tmp_path / "agent")
    fill(st, 30, chunks=2)
    server = tmp_path / "server" / "data" / EXP / st.device_id
    server.mkdir(parents=True)
    for c in st.list_chunks():
        shutil.copy(st.chunk_path(c.chunk_id), server / f"{c.chunk_id}.zip")
    res = merge(Selector.build(EXP, [tmp_path / "agent", tmp_path / "server"]))
    assert len(res.records) == 60 and len(res.chunks) == 2


def test_root_order_irrelevant(tmp_path):
    a = device_storage(tmp_path / "r1")
    b = device_storage(tmp_path / "r2")
    fill(a, 50)
    fill(b, 50)
    one = merge(Selector.build(EXP, [tmp_path / "r1", tmp_path / "r2"]))
    two = merge(Selector.build(EXP, [tmp_path / "r2", tmp_path / "r1"]), workers=1)
    assert [m.to_json() for m in one.records] == [m.to_json() for m in two.records]


def test_flatten_and_cell():
    assert flatten({"a": {"b": 1, "c": {"d": 2}}, "e": [1, 2], "f": {}}) == \
        {"a.b": 1, "a.c.d": 2, "e": [1, 2], "f": {}}
    assert flatten(5) == {"value": 5}
    assert [cell(v) for v in (None, True, 3, 0.1, "s", [1, "x"])] == ["", "true", "3", "0.1", "s", '[1,"x"]']


def test_csv_export_roundtrip(tmp_path):
    st = device_storage(tmp_path / "d")
    written = fill(st, 100, plugins=("alpha", "beta"))
    paths = export_csv(Selector.build(EXP, [tmp_path / "d"]), tmp_path / "csv")
    assert sorted(p.name for p in paths) == ["alpha.csv", "beta.csv"]
    for path in paths:
        raw = path.read_bytes()
        assert b"\r\n" in raw
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["ts_ms", "device_id", "seq", "i", "nested.k", "x"]
        expected = [p for pid, p in written if pid == path.stem]
        assert [(int(r["i"]), float(r["x"]), int(r["nested.k"])) for r in rows] == \
            [(p["i"], p["x"], p["nested"]["k"]) for p in expected]


def test_csv_no_file_for_absent_plugin(tmp_path):
    st = device_storage(tmp_path / "d")
    fill(st, 10, plugins=("only",))
    paths = export_csv(Selector.build(EXP, [tmp_path / "d"]), tmp_path / "csv")
    assert [p.name for p in paths] == ["only.csv"]


def test_csv_heterogeneous_columns(tmp_path):
    st = device_storage(tmp_path / "d")
    st.append("p", {"a": 1})
    st.append("p", {"b": {"c": False}})
    st.append("p", {"a": 2, "b": {"c": True}})
    st.seal_chunk()
    (path,) = export_csv(Selector.build(EXP, [tmp_path / "d"]), tmp_path / "csv")
    rows = list(csv.reader(path.open(newline="")))
    assert rows[0][3:] == ["a", "b.c"]
    assert [r[3:] for r in rows[1:]] == [["1", ""], ["", "false"], ["2", "true"]]


def test_blob_extraction(tmp_path):
    st = device_storage(tmp_path / "d")
    blobs = [os.urandom(100 + i) for i in range(5)]
    for i, blob in enumerate(blobs):
        st.clock.advance(10)
        st.append("audio", blob=blob)
        if i == 2:
            st.seal_chunk()
    st.seal_chunk()
    out = extract_blobs(Selector.build(EXP, [tmp_path / "d"]), tmp_path / "blobs")
    assert out.errors == [] and len(out.files) == 5
    assert [f.read_bytes() for f in out.files] == blobs
    (stream,) = out.streams
    assert stream.read_bytes() == b"".join(blobs)


def test_corrupt_blob_isolated(tmp_path):
    st = device_storage(tmp_path / "d")
    for i in range(3):
        st.clock.advance(10)
        st.append("audio", blob=bytes([i]) * 64)
    m = st.seal_chunk()
    path = st.chunk_path(m.chunk_id)
    with zipfile.ZipFile(path) as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    victim = sorted(n for n in members if n.startswith("blobs/"))[1]
    members[victim] = b"\xee" * 64
    path.write_bytes(reseal(members))
    out = extract_blobs(Selector.build(EXP, [tmp_path / "d"]), tmp_path / "blobs")
    assert len(out.errors) == 1 and len(out.files) == 2


def test_corrupt_chunk_fails_or_skips(tmp_path):
    st = device_storage(tmp_path / "d")
    fill(st, 20, chunks=2)
    path = st.chunk_path(st.list_chunks()[0].chunk_id)
    data = bytearray(path.read_bytes())
    data[40] ^= 0x04
    path.write_bytes(bytes(data))
    sel = Selector.build(EXP, [tmp_path / "d"])
    with pytest.raises(ChunkCorrupted):
        merge(sel)
    res = merge(sel, skip_corrupt=True)
    assert len(res.records) == 20 and len(res.problems) == 1


def test_preview(tmp_path):
    st = device_storage(tmp_path / "d")
    fill(st, 30)
    text = preview(Selector.build(EXP, [tmp_path / "d"]), limit=5)
    lines = text.splitlines()
    assert lines[0] == f"experiment {EXP}: 30 records, 1 chunks, 1 devices" and len(lines) == 6


def test_cli(tmp_path, capsys):
    st = device_storage(tmp_path / "d")
    fill(st, 10)
    root = str(tmp_path / "d")
    assert main(["preview", "--experiment", EXP, "--root", root]) == 0
    assert main(["merge", "--experiment", EXP, "--root", root, "--out", str(tmp_path / "m")]) == 0
    lines = (tmp_path / "m" / "merged.jsonl").read_text().splitlines()
    assert len(lines) == 10 and json.loads(lines[0])["device_id"] == st.device_id
    assert main(["csv", "--experiment", EXP, "--root", root, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "a.csv").exists()
