"""Phase 4: PK-to-FK propagation, view synthesis and the equivalence check.

Views are emitted as ``CREATE TEMP VIEW t AS SELECT ... FROM base.t``.
SQLite refuses persistent views that reach into an attached database, so
the sidecar file stores the DDL as a manifest and every connection opened
through ``ExecutableSchema`` replays it.
"""
from __future__ import annotations

import json
import logging
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .schema import ColumnRef, RefinementMapping, SchemaError, SchemaModel, check_admissible, quote_ident
from .sqlexec import ExecError, ExecutableSchema, RewriteError, execute, results_equal, ro_uri, rewrite_identifiers

if TYPE_CHECKING:
    from .conflict import ConflictPlan
    from .workload import WorkloadItem

log = logging.getLogger(__name__)

MANIFEST_VERSION = "1"


class SynthesisError(RuntimeError):
    def __init__(self, message: str, statement: str | None = None):
        super().__init__(message if statement is None else f"{message}\n  statement: {statement}")
        self.statement = statement


@dataclass
class ViewLayer:
    mapping: RefinementMapping
    ddl: list[str]
    path: Path | None = None
    propagation: dict[ColumnRef, list[ColumnRef]] = field(default_factory=dict)

    def script(self) -> str:
        return "".join(stmt + ";\n" for stmt in self.ddl)


def view_ddl(schema: SchemaModel, mapping: RefinementMapping) -> list[str]:
    """One view per base table, every column aliased to its final name."""
    out = []
    for t in schema.tables:
        cols = ", ".join(f"{quote_ident(c.name)} AS {quote_ident(mapping.name_for(c))}" for c in t.columns)
        out.append(f"CREATE TEMP VIEW {quote_ident(t.name)} AS SELECT {cols} FROM base.{quote_ident(t.name)}")
    return out


def build_view_layer(schema: SchemaModel, mapping: RefinementMapping, path: str | Path | None = None,
                     propagation: dict[ColumnRef, list[ColumnRef]] | None = None) -> ViewLayer:
    """In-memory view layer (no file written) for ``mapping`` over ``schema``."""
    verdict = check_admissible(schema, mapping)
    if not verdict.ok:
        raise SchemaError(f"mapping is inadmissible: {verdict.violations}")
    return ViewLayer(mapping, view_ddl(schema, mapping), Path(path) if path else None, dict(propagation or {}))


def propagate_pk_renames(plan: ConflictPlan, schema: SchemaModel) -> ConflictPlan:
    """Give every FK the new name of the PK it references.

    Follows chains of FKs that are themselves referenced. If the result for
    one PK collides with anything, that PK and its followers all keep their
    original names.
    """
    from .conflict import PROPAGATED, REVERTED, ConflictPlan

    final = dict(plan.final)
    prov = dict(plan.provenance)
    propagation: dict[ColumnRef, list[ColumnRef]] = {}
    notes = list(plan.notes)
    roots = sorted((c for c, n in plan.final.items() if c.is_pk and n != c.name),
                   key=lambda c: (c.table.lower(), c.name.lower()))
    for pk in roots:
        new = final[pk]
        followers: list[ColumnRef] = []
        frontier = [pk]
        while frontier:
            nxt = []
            for p in frontier:
                for child in schema.fk_children(p):
                    if child != pk and child not in followers:
                        followers.append(child)
                        nxt.append(child)
            frontier = nxt
        if not followers:
            continue
        trial = dict(final)
        for f in followers:
            trial[f] = new
        verdict = check_admissible(schema, RefinementMapping(trial))
        if verdict.ok:
            final = trial
            for f in followers:
                prov[f] = PROPAGATED
            propagation[pk] = followers
        else:
            final[pk] = pk.name
            prov[pk] = REVERTED
            notes.append(f"{pk.qualified}: propagation to {', '.join(f.qualified for f in followers)} "
                         f"would collide; rolled back")
            log.warning("rolled back PK rename of %s: %s", pk.qualified, verdict.violations)
    return ConflictPlan(final, prov, dict(plan.deltas), plan.iterations, propagation, notes)


def _manifest(conn: sqlite3.Connection, base_path: Path, layer: ViewLayer) -> None:
    conn.execute("CREATE TABLE refine_meta (key TEXT PRIMARY KEY, value TEXT NOT NULL)")
    conn.execute("CREATE TABLE refine_views (position INTEGER PRIMARY KEY, ddl TEXT NOT NULL)")
    meta = {
        "version": MANIFEST_VERSION,
        "base_path": str(base_path.resolve()),
        "mapping": json.dumps(layer.mapping.to_json(), sort_keys=True),
        "propagation": json.dumps({pk.qualified: [f.qualified for f in fs] for pk, fs in layer.propagation.items()},
                                  sort_keys=True),
    }
    conn.executemany("INSERT INTO refine_meta VALUES (?, ?)", sorted(meta.items()))
    conn.executemany("INSERT INTO refine_views VALUES (?, ?)", list(enumerate(layer.ddl)))


def synthesize_views(plan: ConflictPlan | RefinementMapping, schema: SchemaModel, out_path: str | Path) -> ViewLayer:
    """Write the sidecar view database and check every view compiles against the base."""
    if schema.db_path is None:
        raise SynthesisError("schema has no database path")
    mapping = plan if isinstance(plan, RefinementMapping) else plan.mapping
    propagation = {} if isinstance(plan, RefinementMapping) else plan.propagation
    out_path = Path(out_path)
    base = Path(schema.db_path)
    if out_path.resolve() == base.resolve():
        raise SynthesisError("refusing to write the view layer over the base database")
    layer = build_view_layer(schema, mapping, out_path, propagation)

    # dry run on a scratch connection so a bad statement is reported before any file exists
    probe = sqlite3.connect(":memory:")
    try:
        probe.execute("ATTACH DATABASE ? AS base", (ro_uri(base),))
        for t, stmt in zip(schema.tables, layer.ddl):
            try:
                probe.execute(stmt)
                probe.execute(f"SELECT * FROM temp.{quote_ident(t.name)} LIMIT 0")
            except sqlite3.Error as exc:
                raise SynthesisError(f"view DDL failed: {exc}", stmt) from exc
    finally:
        probe.close()

    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.unlink(missing_ok=True)
    conn = sqlite3.connect(tmp)
    try:
        with conn:
            _manifest(conn, base, layer)
    finally:
        conn.close()
    tmp.replace(out_path)
    return layer


def load_view_layer(path: str | Path, schema: SchemaModel) -> ViewLayer:
    """Read a sidecar written by ``synthesize_views``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    conn = sqlite3.connect(ro_uri(path), uri=True)
    try:
        meta = dict(conn.execute("SELECT key, value FROM refine_meta"))
        ddl = [r[0] for r in conn.execute("SELECT ddl FROM refine_views ORDER BY position")]
    except sqlite3.Error as exc:
        raise SynthesisError(f"{path} is not a view layer: {exc}") from exc
    finally:
        conn.close()
    mapping = RefinementMapping.from_json(schema, json.loads(meta["mapping"]))
    propagation = {}
    for pk, fs in json.loads(meta.get("propagation", "{}")).items():
        t, c = pk.split(".", 1)
        propagation[schema.column(t, c)] = [schema.column(*f.split(".", 1)) for f in fs]
    return ViewLayer(mapping, ddl, path, propagation)


def sidecar_base_path(path: str | Path) -> Path:
    conn = sqlite3.connect(ro_uri(path), uri=True)
    try:
        row = conn.execute("SELECT value FROM refine_meta WHERE key = 'base_path'").fetchone()
    finally:
        conn.close()
    if row is None:
        raise SynthesisError(f"{path} has no base path recorded")
    return Path(row[0])


def write_artifacts(plan: ConflictPlan, layer: ViewLayer, out_dir: str | Path) -> None:
    """``views.sql`` and ``mapping.json`` next to the view database."""
    out_dir = Path(out_dir)
    (out_dir / "views.sql").write_text(layer.script(), encoding="utf-8")
    (out_dir / "mapping.json").write_text(json.dumps(plan.to_json(), indent=2) + "\n", encoding="utf-8")


@dataclass
class Discrepancy:
    qid: str
    kind: str  # rewrite | view-error | result-mismatch
    detail: str
    base_sql: str
    view_sql: str | None = None


@dataclass
class EquivalenceReport:
    checked: int
    skipped: list[tuple[str, str]]
    discrepancies: list[Discrepancy]

    @property
    def ok(self) -> bool:
        return not self.discrepancies

    def to_json(self) -> dict:
        return {
            "checked": self.checked,
            "skipped": [{"qid": q, "reason": r} for q, r in self.skipped],
            "discrepancies": [d.__dict__ for d in self.discrepancies],
        }


def equivalence_check(view_layer: ViewLayer, workload: Sequence[WorkloadItem], schema: SchemaModel,
                      parallelism: int = 1, timeout: float = 30.0) -> EquivalenceReport:
    """Run each gold query on the base and, rewritten, on the view layer; compare results."""
    if schema.db_path is None:
        raise ValueError("schema has no database path")
    base = ExecutableSchema(schema.db_path, None, schema)
    view = ExecutableSchema(schema.db_path, view_layer, schema)

    def one(item):
        try:
            expected = execute(base, item.gold_sql, timeout=timeout)
        except ExecError as exc:
            return "skip", (item.qid, f"gold query fails on base: {exc.kind}")
        try:
            sql = rewrite_identifiers(item.gold_sql, view_layer.mapping, schema)
        except RewriteError as exc:
            return "bad", Discrepancy(item.qid, "rewrite", str(exc), item.gold_sql)
        try:
            got = execute(view, sql, timeout=timeout)
        except ExecError as exc:
            return "bad", Discrepancy(item.qid, "view-error", f"{exc.kind}: {exc}", item.gold_sql, sql)
        if not results_equal(expected, got):
            return "bad", Discrepancy(item.qid, "result-mismatch",
                                      f"{len(expected.rows)} base rows vs {len(got.rows)} view rows",
                                      item.gold_sql, sql)
        return "ok", None

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            results = list(pool.map(one, workload))
    else:
        results = [one(it) for it in workload]
    skipped = [v for k, v in results if k == "skip"]
    bad = [v for k, v in results if k == "bad"]
    return EquivalenceReport(len(results) - len(skipped), skipped, bad)
