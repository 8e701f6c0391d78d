"""Read-only SQL execution against a base database or a view layer."""
from __future__ import annotations

import math
import sqlite3
import time
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Any

from .schema import RefinementMapping, SchemaModel, load_schema, quote_ident
from .sqltokens import QIDENT, analyze, significant, tokenize

if TYPE_CHECKING:
    from .synthesis import ViewLayer

DEFAULT_TIMEOUT = 30.0
ROW_CAP = 100_000
FLOAT_TOL = 1e-6
_ROUND_DIGITS = 6


class ExecError(Exception):
    kind = "error"


class SqlSyntaxError(ExecError):
    kind = "syntax"


class MissingObjectError(ExecError):
    kind = "missing-object"


class ExecTimeout(ExecError):
    kind = "timeout"


class ReadOnlyViolation(ExecError):
    kind = "read-only"


class RewriteError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ResultSet:
    ncols: int
    rows: tuple[tuple, ...]
    ordered: bool = False
    truncated: bool = False


def ro_uri(path: str | Path) -> str:
    return Path(path).resolve().as_uri() + "?mode=ro"


@dataclass(frozen=True)
class ExecutableSchema:
    """Evaluation context: a base database, optionally seen through a view layer."""

    db_path: Path
    view_layer: ViewLayer | None = None
    base_schema: SchemaModel | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "db_path", Path(self.db_path))

    @cached_property
    def schema(self) -> SchemaModel:
        """Schema as visible through this context (refined names when a view layer is present)."""
        base = self.base_schema or load_schema(self.db_path)
        if self.view_layer is None:
            return base
        return self.view_layer.mapping.apply(base)

    def base(self) -> ExecutableSchema:
        return ExecutableSchema(self.db_path, None, self.base_schema)

    def connect(self) -> sqlite3.Connection:
        if self.view_layer is None:
            return sqlite3.connect(ro_uri(self.db_path), uri=True, check_same_thread=False)
        vl = self.view_layer
        main = ro_uri(vl.path) if vl.path is not None else "file::memory:"
        conn = sqlite3.connect(main, uri=True, check_same_thread=False)
        conn.execute("ATTACH DATABASE ? AS base", (ro_uri(self.db_path),))
        for stmt in vl.ddl:
            conn.execute(stmt)
        return conn

    @cached_property
    def sample_rows(self) -> dict[str, list[tuple]]:
        """First five rows of every table in rowid order."""
        out = {}
        conn = self.base().connect()
        try:
            for t in self.schema.table_names:
                try:
                    rows = conn.execute(f"SELECT * FROM {quote_ident(t)} ORDER BY rowid LIMIT 5").fetchall()
                except sqlite3.OperationalError:
                    rows = conn.execute(f"SELECT * FROM {quote_ident(t)} LIMIT 5").fetchall()
                out[t] = rows
        finally:
            conn.close()
        return out


_ALLOWED_FIRST = {"SELECT", "WITH", "VALUES"}
_MUTATING = {"INSERT", "UPDATE", "DELETE", "REPLACE", "DROP", "CREATE", "ALTER", "ATTACH", "DETACH",
             "PRAGMA", "VACUUM", "REINDEX", "ANALYZE", "BEGIN", "COMMIT", "ROLLBACK", "SAVEPOINT", "RELEASE"}


def check_read_only(sql: str) -> None:
    sig = significant(tokenize(sql))
    if not sig:
        raise SqlSyntaxError("empty statement")
    if sig[0].upper not in _ALLOWED_FIRST and sig[0].text != "(":
        raise ReadOnlyViolation(f"only SELECT statements are allowed, got {sig[0].text!r}")
    depth = 0
    for i, t in enumerate(sig):
        if t.text == "(":
            depth += 1
        elif t.text == ")":
            depth -= 1
        elif t.text == ";" and any(x.text != ";" for x in sig[i + 1:]):
            raise ReadOnlyViolation("multiple statements are not allowed")
        elif depth == 0 and t.upper in _MUTATING and sig[0].upper == "WITH":
            raise ReadOnlyViolation(f"mutating statement after WITH: {t.text!r}")


def has_top_level_order_by(sql: str) -> bool:
    sig = significant(tokenize(sql))
    depth = 0
    for i, t in enumerate(sig[:-1]):
        if t.text == "(":
            depth += 1
        elif t.text == ")":
            depth -= 1
        elif depth == 0 and t.upper == "ORDER" and sig[i + 1].upper == "BY":
            return True
    return False


def _classify(exc: sqlite3.Error) -> ExecError:
    msg = str(exc)
    low = msg.lower()
    if "interrupted" in low:
        return ExecTimeout(msg)
    if "no such table" in low or "no such column" in low or "no such function" in low:
        return MissingObjectError(msg)
    if "syntax error" in low or "incomplete input" in low or "unrecognized token" in low:
        return SqlSyntaxError(msg)
    return ExecError(msg)


def execute(schema_view: ExecutableSchema, sql: str, timeout: float = DEFAULT_TIMEOUT,
            row_cap: int = ROW_CAP, conn: sqlite3.Connection | None = None) -> ResultSet:
    """Run one read-only statement; raises an ``ExecError`` subclass on failure."""
    check_read_only(sql)
    own = conn is None
    if own:
        try:
            conn = schema_view.connect()
        except sqlite3.Error as exc:
            raise _classify(exc) from exc
    deadline = time.monotonic() + timeout
    conn.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 1000)
    try:
        cur = conn.execute(sql)
        ncols = len(cur.description or ())
        rows = cur.fetchmany(row_cap + 1)
        truncated = len(rows) > row_cap
        return ResultSet(ncols, tuple(rows[:row_cap]), has_top_level_order_by(sql), truncated)
    except sqlite3.Warning as exc:
        raise ReadOnlyViolation(str(exc)) from exc
    except sqlite3.Error as exc:
        raise _classify(exc) from exc
    finally:
        conn.set_progress_handler(None, 0)
        if own:
            conn.close()


def _canon_cell(v: Any) -> tuple:
    if v is None:
        return (0,)
    if isinstance(v, bool):
        v = int(v)
    if isinstance(v, int):
        return (1, v)
    if isinstance(v, float):
        if math.isnan(v):
            return (1, "nan")
        r = round(v, _ROUND_DIGITS) + 0.0
        if r.is_integer() and abs(r) < 2**53:
            return (1, int(r))
        return (1, r)
    if isinstance(v, (bytes, memoryview)):
        return (3, bytes(v))
    return (2, str(v))


def canonical_row(row: tuple) -> tuple:
    return tuple(_canon_cell(v) for v in row)


def results_equal(a: ResultSet, b: ResultSet) -> bool:
    """Sequence equality if either side is ordered, multiset equality otherwise.

    Numbers are compared after rounding to 1e-6 (a bucketing, so the relation
    stays transitive); NULL only equals NULL.
    """
    if a.truncated or b.truncated:
        return False
    if len(a.rows) != len(b.rows):
        return False
    if a.rows and b.rows and len(a.rows[0]) != len(b.rows[0]):
        return False
    ra = [canonical_row(r) for r in a.rows]
    rb = [canonical_row(r) for r in b.rows]
    if a.ordered or b.ordered:
        return ra == rb
    return Counter(ra) == Counter(rb)


def rewrite_identifiers(sql: str, r: RefinementMapping, schema: SchemaModel) -> str:
    """Replace every reference to a renamed column with its new name.

    Literals, comments, whitespace and all other tokens are carried over
    verbatim, so the identity mapping returns the input unchanged.
    """
    changed = r.changed()
    if not changed:
        return sql
    new_name = {schema.index_of(c): name for c, name in changed.items()}
    qa = analyze(sql, schema)
    tokens = list(qa.tokens)
    for occ in qa.occurrences:
        finals = {new_name.get(schema.index_of(c), c.name) for c in occ.candidates}
        idx = {schema.index_of(c) for c in occ.candidates}
        if not idx & new_name.keys():
            continue
        if len(finals) > 1:
            tok = tokens[occ.token_index]
            raise RewriteError(
                f"reference {tok.text!r} is ambiguous between renamed and unrenamed columns "
                + ", ".join(c.qualified for c in occ.candidates),
                tok.start,
            )
        target = finals.pop()
        tok = tokens[occ.token_index]
        text = quote_ident(target) if tok.kind != QIDENT else '"' + target.replace('"', '""') + '"'
        tokens[occ.token_index] = type(tok)(tok.kind, text, tok.start)
    return "".join(t.text for t in tokens)


__all__ = [
    "ExecutableSchema", "ResultSet", "execute", "results_equal", "rewrite_identifiers",
    "ExecError", "SqlSyntaxError", "MissingObjectError", "ExecTimeout", "ReadOnlyViolation",
    "RewriteError", "check_read_only", "has_top_level_order_by", "canonical_row",
]
