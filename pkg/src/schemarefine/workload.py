"""Question/gold-SQL workloads, per-column query subsets and accuracy metrics."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from .schema import ColumnRef, SchemaModel
from .sqlexec import ExecError, ExecutableSchema, ResultSet, execute, results_equal
from .sqltokens import analyze, iter_referenced

if TYPE_CHECKING:
    from .backends import Text2SqlBackend

log = logging.getLogger(__name__)

NOT_APPLICABLE = None  # marker for undefined rates (e.g. recovery when clean == degraded)
MAX_FAILURE_FRACTION = 0.5


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadItem:
    question: str
    gold_sql: str
    db_id: str
    qid: str = ""


@dataclass
class IngestReport:
    items: list[WorkloadItem]
    dropped: list[tuple[WorkloadItem | dict, str]] = field(default_factory=list)
    skipped_other_db: int = 0


def read_records(path: str | Path) -> list[dict]:
    """Records from JSON Lines, or from a Spider/BIRD-style JSON array.

    Spider's ``query`` and BIRD's ``SQL`` fields are mapped to ``gold_sql``.
    """
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        raw = json.loads(text)
    else:
        raw = [json.loads(line) for line in text.splitlines() if line.strip()]
    out = []
    for rec in raw:
        rec = dict(rec)
        if "gold_sql" not in rec:
            for key in ("query", "SQL", "sql"):
                if key in rec:
                    rec["gold_sql"] = rec[key]
                    break
        out.append(rec)
    return out


def ingest_workload(path: str | Path, schema: SchemaModel, *, strict: bool = False,
                    timeout: float = 30.0, report: bool = False) -> list[WorkloadItem] | IngestReport:
    """Load and validate the workload items belonging to ``schema``'s database.

    Every gold query is executed; items that fail are dropped with a
    diagnostic (or raise when ``strict``). Items of other databases are
    skipped silently when ``schema.db_id`` is set.
    """
    records = read_records(path)
    if not records:
        log.warning("workload %s is empty", path)
    result = IngestReport([])
    base = ExecutableSchema(schema.db_path, None, schema) if schema.db_path else None
    for n, rec in enumerate(records):
        missing = [k for k in ("question", "gold_sql", "db_id") if not isinstance(rec.get(k), str)]
        if missing:
            result.dropped.append((rec, f"missing fields {missing}"))
            continue
        if schema.db_id is not None and rec["db_id"] != schema.db_id:
            result.skipped_other_db += 1
            continue
        item = WorkloadItem(rec["question"], rec["gold_sql"], rec["db_id"], str(rec.get("qid", n)))
        if base is not None:
            try:
                execute(base, item.gold_sql, timeout=timeout)
            except ExecError as exc:
                result.dropped.append((item, f"gold SQL failed ({exc.kind}): {exc}"))
                continue
        result.items.append(item)
    for what, why in result.dropped:
        log.warning("dropped workload item %s: %s", getattr(what, "qid", what), why)
        if strict:
            raise WorkloadError(f"invalid workload item: {why}")
    considered = len(result.items) + len(result.dropped)
    if considered and len(result.dropped) / considered > MAX_FAILURE_FRACTION:
        raise WorkloadError(
            f"{len(result.dropped)} of {considered} workload items failed validation; "
            "database and workload probably do not match"
        )
    return result if report else result.items


def write_workload(items: Iterable[WorkloadItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            rec = asdict(it)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def extract_columns(gold_sql: str, schema: SchemaModel) -> set[ColumnRef]:
    """Schema columns referenced by ``gold_sql`` (aliases resolved, ``*`` expanded)."""
    qa = analyze(gold_sql, schema)
    for w in qa.warnings:
        log.debug("%s", w)
    return set(iter_referenced(qa, schema))


def column_query_index(items: Sequence[WorkloadItem], schema: SchemaModel) -> dict[ColumnRef, list[WorkloadItem]]:
    """Q(c) for every column referenced by at least one item; workload order kept."""
    index: dict[ColumnRef, list[WorkloadItem]] = {}
    for it in items:
        for c in sorted(extract_columns(it.gold_sql, schema), key=schema.index_of):
            index.setdefault(c, []).append(it)
    return index


# -- accuracy ------------------------------------------------------------


@dataclass(frozen=True)
class ItemOutcome:
    qid: str
    correct: bool
    predicted_sql: str
    error: str | None = None


class GoldCache:
    """Gold result sets per (database, query); safe to share across threads."""

    def __init__(self, timeout: float = 30.0):
        self._results: dict[tuple[str, str], ResultSet] = {}
        self.timeout = timeout

    def get(self, base: ExecutableSchema, sql: str) -> ResultSet:
        key = (str(base.db_path), sql)
        res = self._results.get(key)
        if res is None:
            res = execute(base.base(), sql, timeout=self.timeout)
            self._results[key] = res
        return res


def score_item(model: Text2SqlBackend, schema_view: ExecutableSchema, item: WorkloadItem,
               gold: GoldCache, timeout: float = 30.0) -> ItemOutcome:
    """Infer, execute and compare one item; every failure counts as incorrect."""
    from .backends import build_request

    try:
        resp = model.infer(build_request(item.question, schema_view))
    except Exception as exc:  # backends must never abort a batch
        return ItemOutcome(item.qid, False, "", f"backend: {exc}")
    if not resp.ok:
        return ItemOutcome(item.qid, False, resp.predicted_sql, resp.error or "backend failure")
    try:
        predicted = execute(schema_view, resp.predicted_sql, timeout=timeout)
        expected = gold.get(schema_view, item.gold_sql)
    except ExecError as exc:
        return ItemOutcome(item.qid, False, resp.predicted_sql, exc.kind)
    return ItemOutcome(item.qid, results_equal(predicted, expected), resp.predicted_sql)


def evaluate(model: Text2SqlBackend, schema_view: ExecutableSchema, items: Sequence[WorkloadItem],
             gold: GoldCache | None = None, parallelism: int = 1, timeout: float = 30.0) -> list[ItemOutcome]:
    gold = gold or GoldCache(timeout)
    if parallelism <= 1:
        return [score_item(model, schema_view, it, gold, timeout) for it in items]
    with ThreadPoolExecutor(parallelism) as pool:
        return list(pool.map(lambda it: score_item(model, schema_view, it, gold, timeout), items))


def exacc(model: Text2SqlBackend, schema_view: ExecutableSchema, items: Sequence[WorkloadItem],
          gold: GoldCache | None = None, parallelism: int = 1) -> float:
    """Fraction of items whose predicted SQL returns the gold result."""
    if not items:
        raise ValueError("exacc needs at least one item")
    outcomes = evaluate(model, schema_view, items, gold, parallelism)
    return sum(o.correct for o in outcomes) / len(outcomes)


@dataclass
class QualityReport:
    per_model: dict[str, float]
    quality: float
    recovery_rate: float | None = None


def quality(models: Sequence[Text2SqlBackend], schema_view: ExecutableSchema, items: Sequence[WorkloadItem],
            gold: GoldCache | None = None, parallelism: int = 1) -> QualityReport:
    """Mean ExAcc over ``models``; duplicate backends count once each occurrence."""
    if not models:
        raise ValueError("quality needs at least one model")
    gold = gold or GoldCache()
    values = [exacc(m, schema_view, items, gold, parallelism) for m in models]
    per_model = {}
    for m, v in zip(models, values):
        per_model[m.backend_id] = v
    return QualityReport(per_model, sum(values) / len(values))


def recovery_rate(refined: float, degraded: float, clean: float) -> float | None:
    """Share of the clean-vs-degraded gap recovered, in percent; ``None`` if the gap is zero."""
    gap = clean - degraded
    if gap == 0 or math.isclose(gap, 0.0, abs_tol=1e-12):
        return NOT_APPLICABLE
    return (refined - degraded) / gap * 100.0
