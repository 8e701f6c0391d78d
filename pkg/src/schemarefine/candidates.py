"""Phase 2: context-aware renaming candidates for flagged columns."""
from __future__ import annotations

import json
import logging
import random
import re
import sqlite3
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Protocol

from .backends import ChatClient, load_prompt
from .schema import ColumnRef, SchemaModel, is_valid_identifier, quote_ident, scope_of

log = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_N_SAMPLES = 20
NEIGHBOR_SAMPLES = 5
GUIDELINES = (
    "- Keep the original name if it is already clear.\n"
    "- Do not over-specify: prefer the shortest name that removes the ambiguity.\n"
    "- Read the sample values in light of the database domain before naming."
)


@dataclass(frozen=True)
class Neighbor:
    name: str
    data_type: str
    samples: tuple


@dataclass(frozen=True)
class GenerationContext:
    domain_description: str
    table: str
    column: str
    data_type: str
    neighbors: tuple[Neighbor, ...]
    target_samples: tuple
    guidelines: str = GUIDELINES

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=str))


@dataclass
class CandidateSet:
    column: ColumnRef
    original: str
    candidates: list[str]
    generator: str
    rejected: list[tuple[str, str]] = field(default_factory=list)

    @property
    def augmented(self) -> list[str]:
        """Original name first, then candidates in generator rank order."""
        out = [self.original]
        for c in self.candidates:
            if c.lower() not in {x.lower() for x in out}:
                out.append(c)
        return out


class Generator(Protocol):
    generator_id: str

    def propose(self, ctx: GenerationContext, k: int) -> list[str]: ...


def _distinct_values(conn: sqlite3.Connection, table: str, column: str, limit: int = 10_000) -> list:
    sql = (f"SELECT DISTINCT {quote_ident(column)} FROM {quote_ident(table)} "
           f"WHERE {quote_ident(column)} IS NOT NULL LIMIT {limit}")
    return [r[0] for r in conn.execute(sql)]


def _sort_key(v):
    return (type(v).__name__, str(v))


def build_context(schema: SchemaModel, column: ColumnRef, conn: sqlite3.Connection, seed: int = 0,
                  n_samples: int = DEFAULT_N_SAMPLES) -> GenerationContext:
    """Column, neighbor and sample-value context; deterministic for a given seed."""
    values = sorted(_distinct_values(conn, column.table, column.name), key=_sort_key)
    if len(values) > n_samples:
        rng = random.Random(f"{seed}:{column.table}:{column.name}")
        values = sorted(rng.sample(values, n_samples), key=_sort_key)
    neighbors = []
    for c in schema.columns_of(column.table):
        if c == column:
            continue
        vals = _distinct_values(conn, c.table, c.name, NEIGHBOR_SAMPLES)
        neighbors.append(Neighbor(c.name, c.data_type, tuple(vals)))
    return GenerationContext(schema.domain_description, column.table, column.name, column.data_type,
                             tuple(neighbors), tuple(values))


def normalize_candidate(raw: str) -> str:
    s = raw.strip().strip("`\"'[]").strip()
    s = re.sub(r"\s+", "_", s)
    return s.lower()


def generate(ctx: GenerationContext, generator: Generator, k: int, schema: SchemaModel,
             column: ColumnRef) -> CandidateSet:
    """Validated, de-duplicated, collision-filtered candidates in generator order."""
    if k < 1:
        raise ValueError("k must be at least 1")
    try:
        raw = generator.propose(ctx, k)
    except Exception as exc:
        log.warning("generator failed for %s: %s", column, exc)
        raw = []
    taken = {c.name.lower() for c in scope_of(schema, column) if c != column}
    out: list[str] = []
    rejected: list[tuple[str, str]] = []
    for r in raw:
        if not isinstance(r, str):
            rejected.append((repr(r), "not a string"))
            continue
        name = normalize_candidate(r)
        if not is_valid_identifier(name):
            rejected.append((r, "invalid identifier"))
        elif name.lower() == column.name.lower():
            rejected.append((r, "original name"))
        elif name.lower() in taken:
            rejected.append((r, "collides with a column in scope"))
        elif name.lower() in {x.lower() for x in out}:
            rejected.append((r, "duplicate"))
        else:
            out.append(name)
    return CandidateSet(column, column.name, out[:k], generator.generator_id, rejected)


@lru_cache(maxsize=None)
def default_dictionary() -> dict:
    text = resources.files("schemarefine.data").joinpath("abbreviations.json").read_text(encoding="utf-8")
    return json.loads(text)


def _singular(word: str) -> str:
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith("s") and not word.endswith("ss") and len(word) > 3:
        return word[:-1]
    return word


class DictionaryGenerator:
    """Abbreviation expansion with table-name prefixing as the top candidate.

    Rank order: ``<table>_<expansion>`` (unless the expansion already names
    the table), the bare expansion, the expansion of the last token for
    multi-token names, then listed synonyms of the expansion.
    """

    generator_id = "dictionary"

    def __init__(self, abbreviations: dict[str, str] | None = None, synonyms: dict[str, list[str]] | None = None):
        d = default_dictionary()
        self.abbreviations = {k.lower(): v for k, v in (abbreviations or d["abbreviations"]).items()}
        self.synonyms = {k.lower(): list(v) for k, v in (synonyms or d["synonyms"]).items()}

    def expand(self, name: str) -> list[str]:
        return [self.abbreviations.get(tok, tok) for tok in name.lower().split("_") if tok]

    def propose(self, ctx: GenerationContext, k: int) -> list[str]:
        parts = self.expand(ctx.column)
        if not parts:
            return []
        expanded = "_".join(parts)
        table = _singular(ctx.table.lower())
        ranked = []
        if not expanded.startswith(table):
            ranked.append(f"{table}_{expanded}")
        ranked.append(expanded)
        if len(parts) > 1:
            ranked.append(parts[-1])
        ranked.extend(self.synonyms.get(expanded, []))
        out = []
        for r in ranked:
            if r not in out:
                out.append(r)
        return out[:k]


_JSON_ARRAY = re.compile(r"\[[^\[\]]*\]", re.S)


def parse_name_list(text: str) -> list[str]:
    """First well-formed JSON array of strings in ``text``; empty if none."""
    for m in _JSON_ARRAY.finditer(text or ""):
        try:
            val = json.loads(m.group(0))
        except ValueError:
            continue
        if isinstance(val, list):
            names = [x if isinstance(x, str) else x.get("name") if isinstance(x, dict) else None for x in val]
            return [x for x in names if isinstance(x, str)]
    # salvage: a bare list of quoted names
    return re.findall(r'"([A-Za-z_][A-Za-z0-9_ ]*)"', text or "")


class LLMGenerator:
    generator_id = "llm"

    def __init__(self, client: ChatClient, template: str = "generation"):
        self.client = client
        self.template = load_prompt(template)

    def propose(self, ctx: GenerationContext, k: int) -> list[str]:
        neighbors = "\n".join(
            f"  {n.name} ({n.data_type or 'untyped'}): {', '.join(map(str, n.samples))}" for n in ctx.neighbors
        ) or "  (none)"
        prompt = self.template.format(
            k=k, domain=ctx.domain_description or "(none given)", table=ctx.table, column=ctx.column,
            data_type=ctx.data_type or "untyped", target_samples=", ".join(map(str, ctx.target_samples)),
            neighbors=neighbors, guidelines=ctx.guidelines,
        )
        return parse_name_list(self.client.complete([{"role": "user", "content": prompt}]))
