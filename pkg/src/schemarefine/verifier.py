"""Phase 3: execution-grounded verification of renaming candidates."""
from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backends import Text2SqlBackend
from .candidates import CandidateSet
from .schema import ColumnRef, RefinementMapping, SchemaModel
from .sqlexec import ExecutableSchema
from .synthesis import build_view_layer
from .workload import GoldCache, ItemOutcome, WorkloadItem, score_item

log = logging.getLogger(__name__)

DEFAULT_TAU_MIN = 0.05
COMMITTED, RETAINED, SKIPPED = "committed", "retained", "skipped"


@dataclass
class ScoreRecord:
    column: ColumnRef
    candidate: str
    model: str
    outcomes: list[ItemOutcome]

    @property
    def correct(self) -> int:
        return sum(o.correct for o in self.outcomes)

    @property
    def score(self) -> Fraction:
        return Fraction(self.correct, len(self.outcomes))


@dataclass
class RefinementDecision:
    column: ColumnRef
    original: str
    selected: str
    delta: float | None
    status: str
    scores: dict[str, float] = field(default_factory=dict)  # mean score per name in Cand+ order
    runner_ups: list[str] = field(default_factory=list)
    n_queries: int = 0

    def to_json(self) -> dict:
        return {
            "table": self.column.table, "column": self.column.name, "original": self.original,
            "selected": self.selected, "delta": self.delta, "status": self.status,
            "scores": self.scores, "runner_ups": self.runner_ups, "n_queries": self.n_queries,
        }

    @classmethod
    def from_json(cls, schema: SchemaModel, d: Mapping) -> RefinementDecision:
        return cls(schema.column(d["table"], d["column"]), d["original"], d["selected"], d["delta"],
                   d["status"], dict(d["scores"]), list(d["runner_ups"]), d.get("n_queries", 0))


def decide(column: ColumnRef, augmented: Sequence[str], mean_scores: Mapping[str, Fraction],
           tau_min: float, n_queries: int) -> RefinementDecision:
    """Argmax over Cand+ with the conservative threshold.

    Ties go to the original name, then to the better generator rank, so a
    zero gain never commits.
    """
    original = augmented[0]
    # compare exact fractions against tau as written in decimal, so 1/20 meets 0.05
    tau = Fraction(str(tau_min)) if math.isfinite(tau_min) else tau_min
    if n_queries == 0:
        return RefinementDecision(column, original, original, None, SKIPPED, {}, [], 0)
    base = mean_scores[original]
    best = original
    for name in augmented[1:]:
        if mean_scores[name] > mean_scores[best]:
            best = name
    delta = mean_scores[best] - base
    viable = [n for n in augmented[1:] if n != best and mean_scores[n] - base > 0 and mean_scores[n] - base >= tau]
    viable.sort(key=lambda n: -mean_scores[n])  # stable: generator rank breaks ties
    scores = {n: float(mean_scores[n]) for n in augmented}
    if best != original and delta >= tau:
        return RefinementDecision(column, original, best, float(delta), COMMITTED, scores, viable, n_queries)
    return RefinementDecision(column, original, original, float(delta), RETAINED, scores, [], n_queries)


def mean_scores(records: Iterable[ScoreRecord], augmented: Sequence[str]) -> dict[str, Fraction]:
    per: dict[str, list[Fraction]] = {n: [] for n in augmented}
    for r in records:
        per[r.candidate].append(r.score)
    return {n: sum(v, Fraction(0)) / len(v) if v else Fraction(0) for n, v in per.items()}


class ScoreLog:
    """Append-only JSON Lines log, one line per (column, candidate, model, query)."""

    def __init__(self, path: str | Path | None = None, db_id: str | None = None):
        self.path = Path(path) if path is not None else None
        self.db_id = db_id
        self._lock = threading.Lock()
        self.lines = 0

    def append(self, records: Sequence[ScoreRecord]) -> None:
        rows = []
        for rec in records:
            for o in rec.outcomes:
                rows.append({
                    "db_id": self.db_id, "table": rec.column.table, "column": rec.column.name,
                    "candidate": rec.candidate, "model": rec.model, "qid": o.qid,
                    "correct": o.correct, "predicted_sql": o.predicted_sql, "error": o.error,
                })
        with self._lock:
            self.lines += len(rows)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    for row in rows:
                        fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def records_from_log(rows: Iterable[Mapping], schema: SchemaModel) -> dict[ColumnRef, list[ScoreRecord]]:
    grouped: dict[tuple[ColumnRef, str, str], list[ItemOutcome]] = {}
    for r in rows:
        c = schema.column(r["table"], r["column"])
        grouped.setdefault((c, r["candidate"], r["model"]), []).append(
            ItemOutcome(str(r["qid"]), bool(r["correct"]), r.get("predicted_sql", ""), r.get("error")))
    out: dict[ColumnRef, list[ScoreRecord]] = {}
    for (c, cand, model), outcomes in grouped.items():
        out.setdefault(c, []).append(ScoreRecord(c, cand, model, outcomes))
    return out


def verify_column(schema: SchemaModel, cand_set: CandidateSet, q_subset: Sequence[WorkloadItem],
                  models: Sequence[Text2SqlBackend], tau_min: float = DEFAULT_TAU_MIN, *,
                  gold: GoldCache | None = None, score_log: ScoreLog | None = None,
                  parallelism: int = 1, timeout: float = 30.0) -> tuple[RefinementDecision, list[ScoreRecord]]:
    """Score every name in Cand+ on Q(c) with every model and apply the conservative rule."""
    if not models:
        raise ValueError("at least one verifier model is required")
    column = cand_set.column
    augmented = cand_set.augmented
    if not q_subset:
        return decide(column, augmented, {}, tau_min, 0), []
    if schema.db_path is None:
        raise ValueError("schema has no database path")
    gold = gold or GoldCache(timeout)

    views: dict[str, ExecutableSchema] = {}
    broken: dict[str, str] = {}
    for name in augmented:
        try:
            layer = build_view_layer(schema, RefinementMapping({column: name}))
            views[name] = ExecutableSchema(schema.db_path, layer, schema)
            views[name].connect().close()
        except Exception as exc:
            log.warning("view for %s -> %s failed: %s", column, name, exc)
            broken[name] = str(exc)

    tasks = [(name, mi, item) for name in augmented for mi in range(len(models)) for item in q_subset]

    def run(task):
        name, mi, item = task
        if name in broken:
            # still counts as an invocation slot so cost accounting stays exact
            return ItemOutcome(item.qid, False, "", f"view: {broken[name]}")
        return score_item(models[mi], views[name], item, gold, timeout)

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            outcomes = list(pool.map(run, tasks))
    else:
        outcomes = [run(t) for t in tasks]

    records = []
    it = iter(outcomes)
    for name in augmented:
        for m in models:
            records.append(ScoreRecord(column, name, m.backend_id, [next(it) for _ in q_subset]))
    if score_log is not None:
        score_log.append(records)
    decision = decide(column, augmented, mean_scores(records, augmented), tau_min, len(q_subset))
    return decision, records


def predicted_inference_count(a_size: int, k: int, model_count: int,
                              q_subset_sizes: Sequence[int] | float,
                              cand_plus_sizes: Sequence[int] | None = None) -> int:
    """Backend invocations Phase 3 will make.

    With ``cand_plus_sizes`` this is exact: sum over columns of
    |Cand+| * models * |Q(c)|. Without it, each column is charged ``k``
    candidates, and a scalar ``q_subset_sizes`` is read as the mean |Q(c)|.
    """
    if isinstance(q_subset_sizes, (int, float)):
        q = [q_subset_sizes] * a_size
    else:
        q = list(q_subset_sizes)
        if len(q) != a_size:
            raise ValueError("need one |Q(c)| per screened column")
    cands = list(cand_plus_sizes) if cand_plus_sizes is not None else [k] * a_size
    if len(cands) != a_size:
        raise ValueError("need one |Cand+| per screened column")
    total = sum(c * model_count * qc for c, qc in zip(cands, q))
    return int(round(total)) if not math.isinf(total) else total
