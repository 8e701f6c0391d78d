"""Phase 1: pick columns whose names may mislead a Text-to-SQL model."""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Protocol

from .backends import ChatClient, _sql_literal, load_prompt
from .schema import ColumnRef, SchemaModel

log = logging.getLogger(__name__)

CRITERIA = (
    "abbreviations; domain-specific polysemy; single-letter or numbered codes; "
    "generic vocabulary that does not say what the column holds"
)
GENERIC_WORDS = frozenset({"label", "value", "data", "info", "type", "code"})
_VOWELS = set("aeiou")
_LETTER_CODE = re.compile(r"^[A-Za-z][0-9]+$")


@dataclass(frozen=True)
class ScreeningContext:
    domain_description: str
    table: str
    column: str
    data_type: str
    neighbors: tuple[str, ...]
    sample_rows: tuple[tuple, ...]
    criteria: str = CRITERIA

    def to_json(self) -> dict:
        d = asdict(self)
        d["sample_rows"] = [[_jsonable(v) for v in r] for r in self.sample_rows]
        return d


def _jsonable(v):
    return v.hex() if isinstance(v, bytes) else v


@dataclass(frozen=True)
class ScreeningVerdict:
    column: ColumnRef
    flagged: bool
    reason: str
    source: str


class Screener(Protocol):
    screener_id: str

    def assess(self, ctx: ScreeningContext) -> tuple[bool, str]: ...


def structural_exclusions(schema: SchemaModel) -> dict[ColumnRef, str]:
    """Columns kept out of refinement: FK columns and unlinked same-name, same-type homonyms.

    Primary keys stay eligible; their renames are later pushed to the FKs.
    """
    out: dict[ColumnRef, str] = {}
    for i, c in enumerate(schema.columns):
        if c.is_fk or any(a == i for a, _ in schema.fk_index_pairs):
            out[c] = "foreign key"
    by_name: dict[tuple[str, str], list[int]] = {}
    for i, c in enumerate(schema.columns):
        by_name.setdefault((c.name.lower(), c.data_type.strip().upper()), []).append(i)
    for idxs in by_name.values():
        for a in idxs:
            for b in idxs:
                ca, cb = schema.columns[a], schema.columns[b]
                if a != b and ca.table.lower() != cb.table.lower() and not schema.is_fk_pair(a, b):
                    out.setdefault(ca, "implicit join key")
    return out


def screening_context(schema: SchemaModel, c: ColumnRef, sample_rows: dict[str, list[tuple]]) -> ScreeningContext:
    neighbors = tuple(x.name for x in schema.columns_of(c.table) if x != c)
    return ScreeningContext(
        schema.domain_description, c.table, c.name, c.data_type, neighbors,
        tuple(tuple(r) for r in sample_rows.get(c.table, [])[:5]),
    )


class RuleScreener:
    """Offline screener: short names, vowel-less tokens, letter codes, generic words."""

    screener_id = "rules"

    def assess(self, ctx: ScreeningContext) -> tuple[bool, str]:
        name = ctx.column
        low = name.lower()
        if len(name) <= 3:
            return True, "very short name"
        if _LETTER_CODE.match(name):
            return True, "single-letter code"
        if low in GENERIC_WORDS:
            return True, "generic vocabulary"
        for tok in filter(None, low.split("_")):
            if tok.isalpha() and len(tok) <= 6 and not (_VOWELS & set(tok)):
                return True, f"abbreviated token {tok!r}"
        return False, "name is descriptive"


class LLMScreener:
    screener_id = "llm"

    def __init__(self, client: ChatClient, template: str = "screening"):
        self.client = client
        self.template = load_prompt(template)

    def assess(self, ctx: ScreeningContext) -> tuple[bool, str]:
        rows = "\n".join("  (" + ", ".join(_sql_literal(v) for v in r) + ")" for r in ctx.sample_rows) or "  (none)"
        prompt = self.template.format(
            domain=ctx.domain_description or "(none given)", table=ctx.table, column=ctx.column,
            data_type=ctx.data_type or "untyped", neighbors=", ".join(ctx.neighbors) or "(none)",
            sample_rows=rows,
        )
        text = self.client.complete([{"role": "user", "content": prompt}])
        return parse_yes_no(text)


def parse_yes_no(text: str) -> tuple[bool, str]:
    """Flag unless the first word is a clear "no"; unparseable answers are flagged."""
    m = re.match(r"\s*[\"'*]*([A-Za-z]+)", text or "")
    first = m.group(1).lower() if m else ""
    reason = (text or "").strip()[:300]
    if first == "no":
        return False, reason
    if first == "yes":
        return True, reason
    return True, f"unparseable screener answer: {reason!r}"


def screen(schema: SchemaModel, screener: Screener, sample_rows: dict[str, list[tuple]],
           exclusions: dict[ColumnRef, str] | None = None, parallelism: int = 1) -> list[ScreeningVerdict]:
    """One verdict per structurally eligible column, sorted by (table, column)."""
    if exclusions is None:
        exclusions = structural_exclusions(schema)
    eligible = [c for c in schema.columns if c not in exclusions]

    def one(c: ColumnRef) -> ScreeningVerdict:
        try:
            flagged, reason = screener.assess(screening_context(schema, c, sample_rows))
        except Exception as exc:
            # false positives are harmless downstream, so failures flag
            log.warning("screener failed on %s: %s", c, exc)
            flagged, reason = True, f"screener failure: {exc}"
        return ScreeningVerdict(c, bool(flagged), reason, screener.screener_id)

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            verdicts = list(pool.map(one, eligible))
    else:
        verdicts = [one(c) for c in eligible]
    verdicts.sort(key=lambda v: (v.column.table.lower(), v.column.name.lower()))
    return verdicts


def verdicts_to_json(verdicts: list[ScreeningVerdict], exclusions: dict[ColumnRef, str]) -> dict:
    return {
        "excluded": [
            {"table": c.table, "column": c.name, "reason": why}
            for c, why in sorted(exclusions.items(), key=lambda kv: (kv[0].table.lower(), kv[0].name.lower()))
        ],
        "verdicts": [
            {"table": v.column.table, "column": v.column.name, "flagged": v.flagged,
             "reason": v.reason, "source": v.source}
            for v in verdicts
        ],
    }
