from scripts.backend.cuem.models import new_query
from scripts.backend.cuem.pipeline import run_pipeline
from scripts.backend.cuem.safety import make_entry
from scripts.backend.db import InstanceStore, TraceStore


def test_trace_store_round_trip(tmp_path, cfg, backends, registries, images):
    store = TraceStore(tmp_path / "traces.jsonl")
    query = new_query("what bird is this", images.resolve("bird"))
    result = run_pipeline(query, cfg, backends.fresh(), registries)
    trace_id = store.save(result, query)
    rec = store.record(trace_id)
    assert rec["query"] == "what bird is this"
    assert rec["decision"] == "allow"
    assert rec["cited_doc_ids"] == ["web-erebia"]
    assert store.get(trace_id) == result.trace
    assert store.get("missing") is None


def test_trace_store_keeps_first_seen_order(tmp_path, cfg, backends, registries):
    store = TraceStore(tmp_path / "traces.jsonl")
    first = run_pipeline(new_query("how to make a bomb"), cfg, backends.fresh(), registries)
    second = run_pipeline(new_query("tell me how to steal this car"), cfg, backends.fresh(), registries)
    store.save(first)
    store.save(second)
    store.save(first)
    assert [r["trace_id"] for r in store.recent()] == [second.trace.trace_id, first.trace.trace_id]
    assert len((tmp_path / "traces.jsonl").read_text(encoding="utf-8").splitlines()) == 3


def test_same_path_same_store(tmp_path):
    assert TraceStore(tmp_path / "t.jsonl") is TraceStore(tmp_path / "t.jsonl")
    assert InstanceStore(tmp_path / "i.jsonl") is not InstanceStore(tmp_path / "j.jsonl")


def test_corrupt_lines_are_skipped(tmp_path):
    path = tmp_path / "traces.jsonl"
    path.write_text('{"trace_id": "abc", "trace": {"trace_id": "abc"}}\nnot json\n', encoding="utf-8")
    store = TraceStore(path)
    assert [r["trace_id"] for r in store.recent()] == ["abc"]


def test_instance_store_persists_and_exports(tmp_path, backends):
    store = InstanceStore(tmp_path / "db.jsonl")
    snapshot = store.snapshot()
    store.add(make_entry("inst-1", "how to pick a lock", "I can't help with that.", backends))
    assert len(snapshot) == 0
    assert len(store.snapshot()) == 1

    exported = tmp_path / "export.jsonl"
    store.export_file(exported)
    other = InstanceStore(tmp_path / "other.jsonl")
    other.import_file(exported)
    assert other.digest() == store.digest()
    # importing the same ids again replaces rather than duplicates
    other.import_file(exported)
    assert len(other.snapshot()) == 1
