from __future__ import annotations

import json
import logging
import random

import pytest

from schemarefine.backends import MockBackend, Text2SqlResponse
from schemarefine.sqlexec import ExecutableSchema
from schemarefine.workload import (NOT_APPLICABLE, WorkloadError, column_query_index, evaluate, exacc,
                                   ingest_workload, quality, read_records, recovery_rate)


class FixedBackend:
    """Answers every question with the same SQL."""

    def __init__(self, sql: str, backend_id: str = "fixed"):
        self.sql = sql
        self.backend_id = backend_id

    def infer(self, req):
        return Text2SqlResponse(self.sql, self.backend_id)


class BrokenBackend:
    backend_id = "broken"

    def infer(self, req):
        raise ConnectionError("endpoint down")


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_ingest_fixture(tiny):
    items = ingest_workload(tiny.workload, tiny.schema())
    assert [it.qid for it in items] == ["W1", "W2", "W3", "W4", "W5", "W6"]


def test_empty_workload_warns(tiny, tmp_path, caplog):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        assert ingest_workload(p, tiny.schema()) == []
    assert "empty" in caplog.text


def test_failing_item_dropped_with_diagnostic(tiny, tmp_path):
    recs = [json.loads(line) for line in tiny.workload.read_text().splitlines()]
    recs.append({"question": "q", "gold_sql": "SELECT ghost FROM employee", "db_id": "tiny_company"})
    rep = ingest_workload(write_jsonl(tmp_path / "w.jsonl", recs), tiny.schema(), report=True)
    assert len(rep.items) == 6
    assert len(rep.dropped) == 1 and "missing" in rep.dropped[0][1]
    with pytest.raises(WorkloadError):
        ingest_workload(tmp_path / "w.jsonl", tiny.schema(), strict=True)


def test_mostly_failing_workload_aborts(tiny, tmp_path):
    recs = [{"question": "q", "gold_sql": "SELECT ghost FROM employee", "db_id": "tiny_company"}] * 3
    recs.append({"question": "q", "gold_sql": "SELECT nm FROM employee", "db_id": "tiny_company"})
    with pytest.raises(WorkloadError):
        ingest_workload(write_jsonl(tmp_path / "w.jsonl", recs), tiny.schema())


def test_other_databases_skipped(tiny, tmp_path):
    recs = [{"question": "q", "gold_sql": "SELECT x FROM y", "db_id": "other"},
            {"question": "q", "gold_sql": "SELECT nm FROM employee", "db_id": "tiny_company"}]
    rep = ingest_workload(write_jsonl(tmp_path / "w.jsonl", recs), tiny.schema(), report=True)
    assert len(rep.items) == 1 and rep.skipped_other_db == 1


def test_spider_json_array(tmp_path):
    p = tmp_path / "dev.json"
    p.write_text(json.dumps([{"question": "q", "query": "SELECT 1", "db_id": "d"}]))
    assert read_records(p)[0]["gold_sql"] == "SELECT 1"


def test_column_query_index(tiny):
    s = tiny.schema()
    index = column_query_index(ingest_workload(tiny.workload, s), s)
    sizes = {c.qualified: [it.qid for it in items] for c, items in index.items()}
    assert sizes["employee.nm"] == ["W1", "W2", "W4"]
    assert sizes["employee.sal"] == ["W3", "W4"]
    assert sizes["department.dept_nm"] == ["W5", "W6"]
    assert "employee.emp_id" not in sizes


def test_mock_exacc_on_clean_and_degraded(tiny, tiny_clean):
    degraded = ingest_workload(tiny.workload, tiny.schema())
    outcomes = evaluate(MockBackend(), ExecutableSchema(tiny.db), degraded)
    assert [o.qid for o in outcomes if o.correct] == ["W1", "W6"]
    assert exacc(MockBackend(), ExecutableSchema(tiny.db), degraded) == pytest.approx(2 / 6)
    clean = ingest_workload(tiny_clean.workload, tiny_clean.schema())
    assert exacc(MockBackend(), ExecutableSchema(tiny_clean.db), clean) == 1.0


def test_exacc_permutation_invariant(tiny):
    items = ingest_workload(tiny.workload, tiny.schema())
    shuffled = items[:]
    random.Random(3).shuffle(shuffled)
    view = ExecutableSchema(tiny.db)
    assert exacc(MockBackend(), view, items) == exacc(MockBackend(), view, shuffled)


def test_backend_failure_counts_as_incorrect(tiny):
    items = ingest_workload(tiny.workload, tiny.schema())
    view = ExecutableSchema(tiny.db)
    assert exacc(BrokenBackend(), view, items) == 0.0
    assert exacc(FixedBackend("SELECT nope"), view, items) == 0.0


def test_exacc_requires_items(tiny):
    with pytest.raises(ValueError):
        exacc(MockBackend(), ExecutableSchema(tiny.db), [])


def test_quality_is_mean_over_models(tiny):
    items = ingest_workload(tiny.workload, tiny.schema())[1:3]  # W2, W3
    view = ExecutableSchema(tiny.db)
    half = FixedBackend("SELECT nm FROM employee", "half")
    full_items = items[:1]
    assert quality([half], view, full_items).quality == 1.0
    q = quality([half, FixedBackend("SELECT sal FROM employee", "other")], view, items)
    assert q.per_model == {"half": 0.5, "other": 0.5}
    mixed = quality([FixedBackend("SELECT nm FROM employee", "a"), FixedBackend("SELECT 1", "b")], view, full_items)
    assert mixed.quality == 0.5
    dup = quality([MockBackend(), MockBackend()], view, items).quality
    assert dup == quality([MockBackend()], view, items).quality
    with pytest.raises(ValueError):
        quality([], view, items)


def test_recovery_rate():
    assert recovery_rate(73.43, 70.87, 72.77) == pytest.approx(134.7, abs=0.1)
    assert recovery_rate(70.0, 70.0, 80.0) == 0.0
    assert recovery_rate(80.0, 70.0, 80.0) == 100.0
    assert recovery_rate(75.0, 70.0, 70.0) is NOT_APPLICABLE
    # linear in the refined score
    a, b = recovery_rate(71, 70, 80), recovery_rate(72, 70, 80)
    assert recovery_rate(73, 70, 80) - b == pytest.approx(b - a)
