import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path

from scripts.backend.cuem.models import trace_from_dict
from scripts.backend.cuem.safety import InstanceDatabase, InstanceFilterEntry
from scripts.backend.cuem.utils import canonical_json, to_jsonable

logger = logging.getLogger(__name__)


class _PerPathStore:
    """One instance per resolved file path; the first construction loads the file."""

    _instances = None
    _lock = threading.Lock()

    def __new__(cls, path):
        key = Path(path).resolve()
        with cls._lock:
            if cls._instances is None:
                cls._instances = {}
            if key not in cls._instances:
                instance = super().__new__(cls)
                instance._init_store(key)
                cls._instances[key] = instance
        return cls._instances[key]

    def _init_store(self, path):
        self.path = path
        self._write_lock = threading.Lock()
        path.parent.mkdir(parents=True, exist_ok=True)
        self._load()

    def _read_lines(self):
        if not self.path.exists():
            return []
        records = []
        with open(self.path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except ValueError:
                    logger.warning("Skipping corrupt line %d in %s", lineno, self.path)
        return records


class TraceStore(_PerPathStore):
    """Append-only JSON-lines trace log keyed by trace_id; the latest record for an id wins."""

    _instances = None

    def _load(self):
        self._index = {}
        self._order = []
        for rec in self._read_lines():
            self._remember(rec)

    def _remember(self, rec):
        tid = rec["trace_id"]
        if tid not in self._index:
            self._order.append(tid)
        self._index[tid] = rec

    def save(self, result, query=None):
        rec = {
            "answer": result.answer.text if result.answer else None,
            "cited_doc_ids": list(result.answer.cited_doc_ids) if result.answer else [],
            "decision": result.safety.decision.value,
            "query": query.text if query is not None else None,
            "saved_at": datetime.now(timezone.utc).isoformat(),
            "stage": result.safety.stage.value,
            "trace": to_jsonable(result.trace),
            "trace_id": result.trace.trace_id,
        }
        with self._write_lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(canonical_json(rec) + "\n")
            self._remember(rec)
        return rec["trace_id"]

    def record(self, trace_id):
        with self._write_lock:
            return self._index.get(trace_id)

    def get(self, trace_id):
        rec = self.record(trace_id)
        return trace_from_dict(rec["trace"]) if rec else None

    def recent(self, limit=50):
        with self._write_lock:
            ids = self._order[-limit:][::-1]
            return [self._index[t] for t in ids]


class InstanceStore(_PerPathStore):
    """Instance-safety entries persisted as JSON-lines; single writer, readers take snapshots."""

    _instances = None

    def _load(self):
        self._db = InstanceDatabase(InstanceFilterEntry.from_record(r) for r in self._read_lines())

    def snapshot(self):
        return self._db

    def add(self, entry):
        with self._write_lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(canonical_json(entry.to_record()) + "\n")
            self._db = self._db.add(entry)
        logger.info("Added instance entry %s (%d total)", entry.id, len(self._db))
        return self._db

    def replace_all(self, entries):
        db = InstanceDatabase(entries)
        with self._write_lock:
            _write_entries(self.path, db.entries)
            self._db = db
        return db

    def import_file(self, path):
        with open(path, "r", encoding="utf-8") as f:
            incoming = [InstanceFilterEntry.from_record(json.loads(line)) for line in f if line.strip()]
        return self.replace_all(self._db.entries + tuple(incoming))

    def export_file(self, path):
        _write_entries(Path(path), self._db.entries)

    def digest(self):
        return self._db.digest()


def _write_entries(path, entries):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(canonical_json(e.to_record()) + "\n")
    tmp.replace(path)
