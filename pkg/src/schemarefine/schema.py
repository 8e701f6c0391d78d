"""Schema model: tables, columns, foreign keys, naming scopes, refinement mappings."""
from __future__ import annotations

import logging
import re
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

# SQLite keyword list (sqlite3_keyword_name); names in here are quoted on emission.
SQL_KEYWORDS = frozenset("""
ABORT ACTION ADD AFTER ALL ALTER ALWAYS ANALYZE AND AS ASC ATTACH AUTOINCREMENT
BEFORE BEGIN BETWEEN BY CASCADE CASE CAST CHECK COLLATE COLUMN COMMIT CONFLICT
CONSTRAINT CREATE CROSS CURRENT CURRENT_DATE CURRENT_TIME CURRENT_TIMESTAMP
DATABASE DEFAULT DEFERRABLE DEFERRED DELETE DESC DETACH DISTINCT DO DROP EACH
ELSE END ESCAPE EXCEPT EXCLUDE EXCLUSIVE EXISTS EXPLAIN FAIL FILTER FIRST
FOLLOWING FOR FOREIGN FROM FULL GENERATED GLOB GROUP GROUPS HAVING IF IGNORE
IMMEDIATE IN INDEX INDEXED INITIALLY INNER INSERT INSTEAD INTERSECT INTO IS
ISNULL JOIN KEY LAST LEFT LIKE LIMIT MATCH MATERIALIZED NATURAL NO NOT NOTHING
NOTNULL NULL NULLS OF OFFSET ON OR ORDER OTHERS OUTER OVER PARTITION PLAN
PRAGMA PRECEDING PRIMARY QUERY RAISE RANGE RECURSIVE REFERENCES REGEXP REINDEX
RELEASE RENAME REPLACE RESTRICT RETURNING RIGHT ROLLBACK ROW ROWS SAVEPOINT
SELECT SET TABLE TEMP TEMPORARY THEN TIES TO TRANSACTION TRIGGER UNBOUNDED
UNION UNIQUE UPDATE USING VACUUM VALUES VIEW VIRTUAL WHEN WHERE WINDOW WITH
WITHOUT
""".split())


class SchemaError(ValueError):
    """Schema could not be loaded or an operation would break its invariants."""


def is_valid_identifier(name: str) -> bool:
    return bool(IDENTIFIER_RE.match(name))


def quote_ident(name: str) -> str:
    """Return ``name`` as emitted in SQL text: bare when safe, double-quoted otherwise."""
    if is_valid_identifier(name) and name.upper() not in SQL_KEYWORDS:
        return name
    return '"' + name.replace('"', '""') + '"'


def _fold(name: str) -> str:
    return name.lower()


@dataclass(frozen=True)
class ColumnRef:
    table: str
    name: str
    data_type: str = ""
    is_pk: bool = False
    is_fk: bool = False

    @property
    def qualified(self) -> str:
        return f"{self.table}.{self.name}"

    def __str__(self) -> str:
        return self.qualified


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnRef, ...]


class SchemaModel:
    """Immutable schema description.

    Columns are addressed by position; renames keep positions so scopes
    computed at construction are shared by every renamed copy.
    """

    def __init__(
        self,
        columns: Sequence[ColumnRef],
        foreign_keys: Iterable[tuple[ColumnRef, ColumnRef]] = (),
        domain_description: str = "",
        *,
        db_path: str | Path | None = None,
        db_id: str | None = None,
        _fk_pairs: tuple[tuple[int, int], ...] | None = None,
        _scopes: tuple[frozenset[int], ...] | None = None,
    ):
        self._columns = tuple(columns)
        self.domain_description = domain_description
        self.db_path = Path(db_path) if db_path is not None else None
        self.db_id = db_id if db_id is not None else (self.db_path.stem if self.db_path else None)

        self._index: dict[tuple[str, str], int] = {}
        self._table_order: list[str] = []
        self._table_cols: dict[str, list[int]] = {}
        for i, c in enumerate(self._columns):
            key = (_fold(c.table), _fold(c.name))
            if key in self._index:
                raise SchemaError(f"duplicate column name {c.qualified!r} in table {c.table!r}")
            if not c.name:
                raise SchemaError(f"empty column name in table {c.table!r}")
            self._index[key] = i
            tkey = _fold(c.table)
            if tkey not in self._table_cols:
                self._table_order.append(c.table)
                self._table_cols[tkey] = []
            self._table_cols[tkey].append(i)

        if _fk_pairs is None:
            pairs = []
            for child, parent in foreign_keys:
                pairs.append((self.index_of(child), self.index_of(parent)))
            _fk_pairs = tuple(dict.fromkeys(pairs))
        self._fk_pairs = _fk_pairs
        self._fk_set = frozenset(_fk_pairs) | frozenset((b, a) for a, b in _fk_pairs)
        self._scopes = _scopes if _scopes is not None else self._compute_scopes()

    def _compute_scopes(self) -> tuple[frozenset[int], ...]:
        scopes = []
        for i, c in enumerate(self._columns):
            members = set(self._table_cols[_fold(c.table)])
            for a, b in self._fk_pairs:
                if a == i:
                    members.add(b)
                elif b == i:
                    members.add(a)
            scopes.append(frozenset(members))
        return tuple(scopes)

    # -- accessors -------------------------------------------------------

    @property
    def columns(self) -> tuple[ColumnRef, ...]:
        return self._columns

    @property
    def tables(self) -> list[TableDef]:
        return [
            TableDef(t, tuple(self._columns[i] for i in self._table_cols[_fold(t)]))
            for t in self._table_order
        ]

    @property
    def table_names(self) -> list[str]:
        return list(self._table_order)

    @property
    def foreign_keys(self) -> list[tuple[ColumnRef, ColumnRef]]:
        return [(self._columns[a], self._columns[b]) for a, b in self._fk_pairs]

    @property
    def fk_index_pairs(self) -> tuple[tuple[int, int], ...]:
        return self._fk_pairs

    def has_table(self, table: str) -> bool:
        return _fold(table) in self._table_cols

    def table_name(self, table: str) -> str:
        """Canonical casing of ``table``."""
        for t in self._table_order:
            if _fold(t) == _fold(table):
                return t
        raise SchemaError(f"unknown table {table!r}")

    def columns_of(self, table: str) -> list[ColumnRef]:
        try:
            return [self._columns[i] for i in self._table_cols[_fold(table)]]
        except KeyError:
            raise SchemaError(f"unknown table {table!r}") from None

    def column_indices(self, table: str) -> list[int]:
        return list(self._table_cols.get(_fold(table), ()))

    def find(self, table: str, name: str) -> ColumnRef | None:
        i = self._index.get((_fold(table), _fold(name)))
        return None if i is None else self._columns[i]

    def column(self, table: str, name: str) -> ColumnRef:
        c = self.find(table, name)
        if c is None:
            raise SchemaError(f"unknown column {table}.{name}")
        return c

    def index_of(self, c: ColumnRef) -> int:
        try:
            return self._index[(_fold(c.table), _fold(c.name))]
        except KeyError:
            raise SchemaError(f"unknown column {c.qualified}") from None

    def scope_indices(self, i: int) -> frozenset[int]:
        return self._scopes[i]

    def is_fk_pair(self, i: int, j: int) -> bool:
        return (i, j) in self._fk_set

    def shares_key_name(self, i: int, j: int) -> bool:
        """Whether positions ``i`` and ``j`` may carry the same name: a cross-table FK pair."""
        return self.is_fk_pair(i, j) and _fold(self._columns[i].table) != _fold(self._columns[j].table)

    def fk_children(self, parent: ColumnRef) -> list[ColumnRef]:
        p = self.index_of(parent)
        return [self._columns[a] for a, b in self._fk_pairs if b == p]

    # -- derivation ------------------------------------------------------

    def with_names(self, names: Mapping[int, str]) -> SchemaModel:
        """Copy with the columns at the given positions renamed."""
        cols = list(self._columns)
        for i, new in names.items():
            cols[i] = ColumnRef(cols[i].table, new, cols[i].data_type, cols[i].is_pk, cols[i].is_fk)
        return SchemaModel(
            cols,
            domain_description=self.domain_description,
            db_path=self.db_path,
            db_id=self.db_id,
            _fk_pairs=self._fk_pairs,
            _scopes=self._scopes,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SchemaModel):
            return NotImplemented
        return (
            self._columns == other._columns
            and self._fk_pairs == other._fk_pairs
            and self.domain_description == other.domain_description
        )

    def __hash__(self) -> int:
        return hash((self._columns, self._fk_pairs))

    def __repr__(self) -> str:
        return f"SchemaModel(db_id={self.db_id!r}, tables={len(self._table_order)}, columns={len(self._columns)})"


@dataclass
class RefinementMapping:
    """Column -> new surface name. Columns absent from ``entries`` keep their names."""

    entries: dict[ColumnRef, str] = field(default_factory=dict)

    def name_for(self, c: ColumnRef) -> str:
        return self.entries.get(c, c.name)

    def is_identity(self) -> bool:
        return all(c.name == new for c, new in self.entries.items())

    def changed(self) -> dict[ColumnRef, str]:
        return {c: new for c, new in self.entries.items() if c.name != new}

    def apply(self, schema: SchemaModel) -> SchemaModel:
        return schema.with_names({schema.index_of(c): new for c, new in self.changed().items()})

    def inverse(self, schema: SchemaModel) -> RefinementMapping:
        """Mapping over ``self.apply(schema)`` that restores the original names."""
        renamed = self.apply(schema)
        inv = {}
        for c, new in self.changed().items():
            inv[renamed.columns[schema.index_of(c)]] = c.name
        return RefinementMapping(inv)

    def to_json(self) -> list[dict]:
        return [
            {"table": c.table, "column": c.name, "new_name": new}
            for c, new in sorted(self.entries.items(), key=lambda kv: (kv[0].table.lower(), kv[0].name.lower()))
        ]

    @classmethod
    def from_json(cls, schema: SchemaModel, rows: Iterable[Mapping]) -> RefinementMapping:
        return cls({schema.column(r["table"], r["column"]): r["new_name"] for r in rows})


@dataclass(frozen=True)
class Violation:
    kind: str  # "duplicate" | "invalid-identifier"
    name: str
    columns: tuple[ColumnRef, ...]


@dataclass(frozen=True)
class AdmissibilityVerdict:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


# -- operations ----------------------------------------------------------


def load_schema(db_path: str | Path, domain_description: str = "", db_id: str | None = None) -> SchemaModel:
    """Read tables, columns, PK and FK metadata from an SQLite catalog."""
    path = Path(db_path)
    if not path.is_file():
        raise SchemaError(f"database file not found: {path}")
    try:
        conn = sqlite3.connect(path.resolve().as_uri() + "?mode=ro", uri=True)
    except sqlite3.Error as exc:
        raise SchemaError(f"cannot open {path}: {exc}") from exc
    try:
        tables = [
            r[0]
            for r in conn.execute(
                "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
            )
        ]
        if not tables:
            raise SchemaError(f"no tables in {path}")
        columns: list[ColumnRef] = []
        raw_fks: list[tuple[str, str, str, str | None]] = []
        pk_cols: dict[str, list[str]] = {}
        for t in tables:
            info = conn.execute(f"PRAGMA table_info({quote_ident(t)})").fetchall()
            fk_rows = conn.execute(f"PRAGMA foreign_key_list({quote_ident(t)})").fetchall()
            fk_from = {_fold(r[3]) for r in fk_rows}
            pk_cols[_fold(t)] = [r[1] for r in sorted(info, key=lambda r: r[5]) if r[5] > 0]
            for _cid, name, ctype, _notnull, _dflt, pk in info:
                columns.append(ColumnRef(t, name, ctype or "", pk > 0, _fold(name) in fk_from))
            for r in fk_rows:
                # (id, seq, parent_table, from, to, ...)
                raw_fks.append((t, r[3], r[2], r[4]))
    except sqlite3.DatabaseError as exc:
        raise SchemaError(f"cannot read catalog of {path}: {exc}") from exc
    finally:
        conn.close()

    lookup = {(_fold(c.table), _fold(c.name)): c for c in columns}
    fks = []
    for child_t, child_c, parent_t, parent_c in raw_fks:
        if parent_c is None:
            # REFERENCES parent without a column list targets the parent's PK
            pks = pk_cols.get(_fold(parent_t), [])
            parent_c = pks[0] if len(pks) == 1 else None
        child = lookup.get((_fold(child_t), _fold(child_c)))
        parent = lookup.get((_fold(parent_t), _fold(parent_c))) if parent_c else None
        if child is None or parent is None:
            log.warning("skipping dangling foreign key %s.%s -> %s.%s", child_t, child_c, parent_t, parent_c)
            continue
        fks.append((child, parent))
    return SchemaModel(columns, fks, domain_description, db_path=path, db_id=db_id)


def scope_of(schema: SchemaModel, c: ColumnRef) -> set[ColumnRef]:
    """Same-table columns plus columns FK-linked to ``c`` in either direction."""
    i = schema.index_of(c)
    return {schema.columns[j] for j in schema.scope_indices(i)}


def collision_groups(schema: SchemaModel, names: Sequence[str]) -> list[tuple[str, frozenset[int]]]:
    """Groups of column positions sharing a name within some column's scope.

    ``names`` gives the candidate surface name for every column position.
    A column and its direct FK partner in another table may share a name
    (join-key convention).
    """
    seen: dict[frozenset[int], str] = {}
    for i in range(len(names)):
        key = _fold(names[i])
        group = {i}
        for j in schema.scope_indices(i):
            if j != i and _fold(names[j]) == key and not schema.shares_key_name(i, j):
                group.add(j)
        if len(group) > 1:
            seen.setdefault(frozenset(group), names[i])
    return [(name, g) for g, name in seen.items()]


def check_admissible(schema: SchemaModel, r: RefinementMapping) -> AdmissibilityVerdict:
    names = [c.name for c in schema.columns]
    violations = []
    for c, new in r.entries.items():
        i = schema.index_of(c)
        names[i] = new
        if new != c.name and not is_valid_identifier(new):
            violations.append(Violation("invalid-identifier", new, (c,)))
    for name, group in collision_groups(schema, names):
        cols = tuple(sorted((schema.columns[j] for j in group), key=lambda x: (x.table.lower(), x.name.lower())))
        violations.append(Violation("duplicate", name, cols))
    violations.sort(key=lambda v: (v.kind, v.name.lower(), [x.qualified.lower() for x in v.columns]))
    return AdmissibilityVerdict(tuple(violations))


def apply_rename(schema: SchemaModel, c: ColumnRef, new_name: str) -> SchemaModel:
    """Copy of ``schema`` with only ``name(c)`` replaced."""
    if not is_valid_identifier(new_name):
        raise SchemaError(f"not a valid identifier: {new_name!r}")
    i = schema.index_of(c)
    if schema.columns[i].name == new_name:
        return schema
    verdict = check_admissible(schema, RefinementMapping({schema.columns[i]: new_name}))
    if not verdict.ok:
        raise SchemaError(f"renaming {c.qualified} to {new_name!r} is inadmissible: {verdict.violations}")
    return schema.with_names({i: new_name})
