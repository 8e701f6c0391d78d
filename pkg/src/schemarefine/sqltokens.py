"""Lossless SQL tokenizer and schema-aware identifier resolution.

The tokenizer never fails on odd input: unterminated strings or comments
run to the end of the text. Joining token texts reproduces the input
exactly, which is what lets rewrites leave untouched queries byte-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

from .schema import ColumnRef, SchemaModel

log = logging.getLogger(__name__)

WS, COMMENT, STRING, QIDENT, WORD, NUMBER, PUNCT = (
    "ws", "comment", "string", "qident", "word", "number", "punct",
)

_TWO_CHAR_OPS = {"<=", ">=", "<>", "!=", "==", "||", "<<", ">>", "->"}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    start: int

    @property
    def value(self) -> str:
        """Identifier value: unquoted for quoted identifiers, as written otherwise."""
        if self.kind == QIDENT:
            body = self.text[1:-1]
            if self.text[0] == '"':
                return body.replace('""', '"')
            if self.text[0] == "`":
                return body.replace("``", "`")
            return body
        return self.text

    @property
    def upper(self) -> str:
        return self.text.upper() if self.kind == WORD else ""


def tokenize(sql: str) -> list[Token]:
    out: list[Token] = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        start = i
        if ch.isspace():
            while i < n and sql[i].isspace():
                i += 1
            out.append(Token(WS, sql[start:i], start))
        elif sql.startswith("--", i):
            j = sql.find("\n", i)
            i = n if j < 0 else j
            out.append(Token(COMMENT, sql[start:i], start))
        elif sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            i = n if j < 0 else j + 2
            out.append(Token(COMMENT, sql[start:i], start))
        elif ch in "'\"`":
            i += 1
            while i < n:
                if sql[i] == ch:
                    if i + 1 < n and sql[i + 1] == ch:
                        i += 2
                        continue
                    i += 1
                    break
                i += 1
            out.append(Token(STRING if ch == "'" else QIDENT, sql[start:i], start))
        elif ch == "[":
            j = sql.find("]", i)
            i = n if j < 0 else j + 1
            out.append(Token(QIDENT, sql[start:i], start))
        elif ch.isdigit() or (ch == "." and i + 1 < n and sql[i + 1].isdigit()):
            while i < n and (sql[i].isalnum() or sql[i] == "."):
                if sql[i] in "eE" and i + 1 < n and sql[i + 1] in "+-":
                    i += 1
                i += 1
            out.append(Token(NUMBER, sql[start:i], start))
        elif ch.isalpha() or ch == "_" or ch == "$":
            while i < n and (sql[i].isalnum() or sql[i] in "_$"):
                i += 1
            out.append(Token(WORD, sql[start:i], start))
        elif ch in "?:@" and i + 1 < n and (sql[i + 1].isalnum() or sql[i + 1] == "_"):
            i += 1
            while i < n and (sql[i].isalnum() or sql[i] == "_"):
                i += 1
            out.append(Token(PUNCT, sql[start:i], start))
        else:
            if sql[i:i + 2] in _TWO_CHAR_OPS:
                i += 2
            else:
                i += 1
            out.append(Token(PUNCT, sql[start:i], start))
    return out


def untokenize(tokens: list[Token]) -> str:
    return "".join(t.text for t in tokens)


def significant(tokens: list[Token]) -> list[Token]:
    return [t for t in tokens if t.kind not in (WS, COMMENT)]


# Words that end a FROM list or start a new clause.
_CLAUSE_WORDS = frozenset(
    "WHERE GROUP ORDER HAVING LIMIT OFFSET UNION INTERSECT EXCEPT WINDOW ON USING "
    "SELECT VALUES RETURNING".split()
)
_JOIN_WORDS = frozenset("JOIN".split())
_JOIN_MODIFIERS = frozenset("NATURAL LEFT RIGHT FULL INNER OUTER CROSS".split())
# Words never taken as a column reference (structural keywords and literals).
STRUCTURAL = frozenset(
    """SELECT FROM WHERE GROUP BY ORDER HAVING LIMIT OFFSET JOIN INNER LEFT RIGHT FULL
    OUTER CROSS NATURAL ON USING AS AND OR NOT IN IS NULL LIKE GLOB REGEXP MATCH BETWEEN
    EXISTS CASE WHEN THEN ELSE END DISTINCT ALL UNION INTERSECT EXCEPT ASC DESC WITH
    RECURSIVE CAST ESCAPE COLLATE VALUES TRUE FALSE ISNULL NOTNULL NULLS FIRST LAST
    OVER PARTITION FILTER WINDOW ROWS RANGE PRECEDING FOLLOWING UNBOUNDED CURRENT ROW""".split()
)


def is_identifier_token(t: Token) -> bool:
    return t.kind in (WORD, QIDENT)


@dataclass
class ColumnOccurrence:
    token_index: int  # index into the full token list
    candidates: tuple[ColumnRef, ...]
    qualified: bool


@dataclass
class QueryAnalysis:
    tokens: list[Token]
    tables: list[str] = field(default_factory=list)  # canonical names, in order of appearance
    aliases: dict[str, set[str]] = field(default_factory=dict)  # alias (lower) -> table names
    occurrences: list[ColumnOccurrence] = field(default_factory=list)
    star_tables: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _sig_positions(tokens: list[Token]) -> list[int]:
    return [i for i, t in enumerate(tokens) if t.kind not in (WS, COMMENT)]


def analyze(sql: str, schema: SchemaModel) -> QueryAnalysis:
    """Locate table references, aliases and column references in ``sql``.

    Resolution is by schema vocabulary, not a grammar: a word (or quoted
    identifier) names a column when it matches a column of some table in
    the query's FROM/JOIN lists. Aliases are global to the statement, so a
    reused alias maps to every table it was bound to.
    """
    tokens = tokenize(sql)
    qa = QueryAnalysis(tokens)
    pos = _sig_positions(tokens)
    sig = [tokens[i] for i in pos]
    table_slots: set[int] = set()  # sig indices naming tables or aliases
    alias_defs: set[str] = set()

    def up(k: int) -> str:
        return sig[k].upper if 0 <= k < len(sig) else ""

    def add_table(name: str, alias: str | None) -> None:
        canon = schema.table_name(name) if schema.has_table(name) else None
        if canon is not None and canon not in qa.tables:
            qa.tables.append(canon)
        targets = {canon} if canon else set()
        qa.aliases.setdefault(name.lower(), set()).update(targets)
        if alias:
            qa.aliases.setdefault(alias.lower(), set()).update(targets)
            alias_defs.add(alias.lower())

    # pass 1: FROM/JOIN lists and CTE names
    k = 0
    depth_from: list[int] = []  # paren depths at which a FROM list is open
    depth = 0
    expect_table = False
    while k < len(sig):
        t = sig[k]
        u = up(k)
        if t.text == "(":
            depth += 1
            expect_table = False
            k += 1
            continue
        if t.text == ")":
            if depth_from and depth_from[-1] == depth:
                depth_from.pop()
            depth -= 1
            k += 1
            continue
        if u == "WITH" or (u == "RECURSIVE" and up(k - 1) == "WITH"):
            k += 1
            continue
        if is_identifier_token(t) and up(k + 1) == "AS" and k + 2 < len(sig) and sig[k + 2].text == "(" and (
            up(k - 1) in ("WITH", "RECURSIVE") or (k > 0 and sig[k - 1].text == ",")
        ) and not (depth_from and depth_from[-1] == depth):
            # CTE name: treated as an alias of unknown tables
            qa.aliases.setdefault(t.value.lower(), set())
            alias_defs.add(t.value.lower())
            table_slots.add(k)
            k += 1
            continue
        if u == "FROM":
            if depth_from and depth_from[-1] == depth:
                depth_from.pop()
            depth_from.append(depth)
            expect_table = True
            k += 1
            continue
        in_from = bool(depth_from) and depth_from[-1] == depth
        if in_from:
            if u in _JOIN_WORDS:
                expect_table = True
                k += 1
                continue
            if u in _JOIN_MODIFIERS:
                k += 1
                continue
            if u in _CLAUSE_WORDS:
                if u in ("ON", "USING"):
                    expect_table = False
                    k += 1
                    continue
                depth_from.pop()
                expect_table = False
                continue  # reprocess as a normal token
            if t.text == ",":
                # a comma only separates tables when we are not inside an ON condition
                expect_table = True
                k += 1
                continue
            if expect_table and is_identifier_token(t):
                name_k = k
                name = t.value
                if k + 2 < len(sig) and sig[k + 1].text == "." and is_identifier_token(sig[k + 2]):
                    # schema-qualified table: main.t
                    table_slots.add(k)
                    name_k = k + 2
                    name = sig[k + 2].value
                table_slots.add(name_k)
                k = name_k + 1
                alias = None
                if up(k) == "AS" and k + 1 < len(sig) and is_identifier_token(sig[k + 1]):
                    alias = sig[k + 1].value
                    table_slots.add(k + 1)
                    k += 2
                elif k < len(sig) and is_identifier_token(sig[k]) and sig[k].upper not in STRUCTURAL \
                        and sig[k].upper not in _CLAUSE_WORDS and sig[k].upper not in _JOIN_MODIFIERS:
                    alias = sig[k].value
                    table_slots.add(k)
                    k += 1
                add_table(name, alias)
                expect_table = False
                continue
        k += 1

    # subquery aliases: ") AS x" / ") x" inside FROM lists
    for k in range(1, len(sig)):
        if sig[k - 1].text == ")" and k not in table_slots:
            if up(k) == "AS" and k + 1 < len(sig) and is_identifier_token(sig[k + 1]):
                cand = k + 1
            elif is_identifier_token(sig[k]) and sig[k].upper not in STRUCTURAL and sig[k].upper not in _CLAUSE_WORDS \
                    and sig[k].upper not in _JOIN_MODIFIERS:
                cand = k
            else:
                continue
            name = sig[cand].value.lower()
            qa.aliases.setdefault(name, set())
            alias_defs.add(name)
            table_slots.add(cand)

    # select-list aliases: "expr AS name" outside FROM lists
    select_aliases: set[str] = set()
    for k in range(1, len(sig) - 1):
        if up(k) == "AS" and k + 1 not in table_slots and is_identifier_token(sig[k + 1]) \
                and not (k + 2 < len(sig) and sig[k + 2].text == "("):
            select_aliases.add(sig[k + 1].value.lower())
            table_slots.add(k + 1)

    query_tables = qa.tables or []
    from_cols: dict[str, list[ColumnRef]] = {}
    for tname in query_tables:
        for c in schema.columns_of(tname):
            from_cols.setdefault(c.name.lower(), []).append(c)

    # pass 2: column references and stars
    for k, t in enumerate(sig):
        if k in table_slots:
            continue
        if t.text == "*":
            prev = sig[k - 1] if k > 0 else None
            if prev is not None and prev.text == "." and k >= 2 and is_identifier_token(sig[k - 2]):
                for tname in sorted(qa.aliases.get(sig[k - 2].value.lower(), ())):
                    if tname not in qa.star_tables:
                        qa.star_tables.append(tname)
            elif prev is not None and (prev.upper in ("SELECT", "DISTINCT", "ALL") or prev.text == ","):
                for tname in query_tables:
                    if tname not in qa.star_tables:
                        qa.star_tables.append(tname)
            continue
        if not is_identifier_token(t):
            continue
        if t.kind == WORD and t.upper in STRUCTURAL:
            continue
        nxt = sig[k + 1] if k + 1 < len(sig) else None
        prev = sig[k - 1] if k > 0 else None
        if nxt is not None and nxt.text == "(" and t.kind == WORD:
            continue  # function call
        if nxt is not None and nxt.text == ".":
            continue  # qualifier; handled with the qualified column
        name = t.value.lower()
        if prev is not None and prev.text == "." and k >= 2:
            qual = sig[k - 2]
            if not is_identifier_token(qual):
                continue
            targets = qa.aliases.get(qual.value.lower())
            if targets is None and schema.has_table(qual.value):
                targets = {schema.table_name(qual.value)}
            cands: list[ColumnRef] = []
            if targets:
                for tname in sorted(targets):
                    c = schema.find(tname, t.value)
                    if c is not None:
                        cands.append(c)
            else:
                # unknown qualifier (subquery/CTE alias): any query table with that column
                cands = list(from_cols.get(name, []))
            if cands:
                qa.occurrences.append(ColumnOccurrence(pos[k], tuple(cands), True))
            continue
        cands = from_cols.get(name, [])
        if not cands:
            continue
        if len(cands) > 1:
            msg = f"ambiguous column {t.value!r} at offset {t.start}: " + ", ".join(c.qualified for c in cands)
            qa.warnings.append(msg)
        qa.occurrences.append(ColumnOccurrence(pos[k], tuple(cands), False))
    return qa


def iter_referenced(qa: QueryAnalysis, schema: SchemaModel) -> Iterator[ColumnRef]:
    for occ in qa.occurrences:
        yield from occ.candidates
    for tname in qa.star_tables:
        yield from schema.columns_of(tname)
