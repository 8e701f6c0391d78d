"""Text-to-SQL backends: a deterministic lexical matcher and an HTTP chat adapter."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

from .schema import SchemaModel, quote_ident

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"


@dataclass(frozen=True)
class Text2SqlRequest:
    question: str
    schema: SchemaModel
    sample_rows: dict[str, tuple[tuple, ...]] = field(default_factory=dict)
    db_id: str | None = None

    def serialize_schema(self) -> str:
        return serialize_schema(self.schema, self.sample_rows)

    def cache_key(self, backend_id: str) -> str:
        h = hashlib.sha256()
        for part in (backend_id, PROMPT_VERSION, self.serialize_schema(), self.question):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


@dataclass(frozen=True)
class Text2SqlResponse:
    predicted_sql: str
    backend_id: str
    latency: float = 0.0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and bool(self.predicted_sql.strip())


class Text2SqlBackend(Protocol):
    backend_id: str

    def infer(self, req: Text2SqlRequest) -> Text2SqlResponse: ...


def build_request(question: str, schema_view) -> Text2SqlRequest:
    """Request against an ``ExecutableSchema``: refined names, five sample rows per table."""
    samples = {t: tuple(rows) for t, rows in schema_view.sample_rows.items()}
    return Text2SqlRequest(question, schema_view.schema, samples, schema_view.schema.db_id)


def _sql_literal(v: Any) -> str:
    if v is None:
        return "NULL"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, bytes):
        return "X'" + v.hex() + "'"
    return "'" + str(v).replace("'", "''") + "'"


def serialize_schema(schema: SchemaModel, sample_rows: dict[str, Sequence[tuple]] | None = None) -> str:
    """Compact CREATE TABLE listing, optionally followed by sample rows per table."""
    fks_by_table: dict[str, list[str]] = {}
    for child, parent in schema.foreign_keys:
        fks_by_table.setdefault(child.table, []).append(
            f"  FOREIGN KEY ({quote_ident(child.name)}) REFERENCES {quote_ident(parent.table)}({quote_ident(parent.name)})"
        )
    out = []
    for t in schema.tables:
        lines = []
        for c in t.columns:
            line = f"  {quote_ident(c.name)} {c.data_type}".rstrip()
            if c.is_pk:
                line += " PRIMARY KEY"
            lines.append(line)
        lines.extend(fks_by_table.get(t.name, []))
        out.append(f"CREATE TABLE {quote_ident(t.name)} (\n" + ",\n".join(lines) + "\n);")
        rows = (sample_rows or {}).get(t.name)
        if rows:
            out.append(f"/* sample rows of {t.name}:")
            for r in rows:
                out.append("   (" + ", ".join(_sql_literal(v) for v in r) + ")")
            out.append("*/")
    return "\n".join(out)


# -- deterministic mock ----------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def name_tokens(name: str) -> set[str]:
    return set(words(name.replace("_", " ")))


def overlap(question: set[str], name: str) -> float:
    toks = name_tokens(name)
    if not toks:
        return 0.0
    return len(question & toks) / len(toks)


def _contains_run(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


class MockBackend:
    """Lexical matcher standing in for a Text-to-SQL model.

    Scores each column by the fraction of its underscore-separated name
    tokens present in the question, adds one for a column whose sampled
    text value appears in the question, and picks the table with the
    highest summed score (earliest table on ties). Only the names it sees
    decide what it emits, so clearer names give better SQL.
    """

    backend_id = "mock"

    def infer(self, req: Text2SqlRequest) -> Text2SqlResponse:
        return Text2SqlResponse(self.predict(req), self.backend_id)

    def predict(self, req: Text2SqlRequest) -> str:
        schema = req.schema
        tables = schema.tables
        qwords = words(req.question)
        if not qwords:
            return f"SELECT * FROM {quote_ident(tables[0].name)}"
        qset = set(qwords)

        best = None
        for t in tables:
            scores = [overlap(qset, c.name) for c in t.columns]
            match = None
            for row in req.sample_rows.get(t.name, ()):
                for j, v in enumerate(row[:len(t.columns)]):
                    if isinstance(v, str) and match is None:
                        vw = words(v)
                        if vw and _contains_run(qwords, vw):
                            match = (j, v)
            if match is not None:
                scores[match[0]] += 1.0
            total = sum(scores)
            if best is None or total > best[0]:
                best = (total, t, scores, match)

        _, table, scores, match = best
        pick = [j for j in range(len(table.columns)) if match is None or j != match[0]]
        top = max((scores[j] for j in pick), default=0.0)
        selected = [table.columns[j].name for j in pick if top > 0 and scores[j] == top]

        where = ""
        if match is not None:
            where = f" WHERE {quote_ident(table.columns[match[0]].name)} = {_sql_literal(match[1])}"
        if qwords[:2] == ["how", "many"]:
            proj = "COUNT(*)"
        elif selected:
            proj = ", ".join(quote_ident(c) for c in selected)
        else:
            proj = "*"
        return f"SELECT {proj} FROM {quote_ident(table.name)}{where}"


# -- HTTP chat adapter -------------------------------------------------------


def load_prompt(name: str) -> str:
    return resources.files("schemarefine.data.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str | None = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 1
    max_in_flight: int = 8
    temperature: float = 0.0


class ChatClient:
    """Minimal OpenAI-compatible chat-completion client with bounded concurrency."""

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {}
        key = os.environ.get(config.api_key_env) if config.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(base_url=config.base_url, headers=headers, timeout=config.timeout,
                                  transport=transport)
        self._slots = threading.BoundedSemaphore(max(1, config.max_in_flight))

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.config.model, "messages": messages, "temperature": self.config.temperature}
        last: Exception | None = None
        for _ in range(self.config.max_retries + 1):
            with self._slots:
                try:
                    resp = self._http.post("/chat/completions", json=payload)
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"]
                except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                    last = exc
        raise ConnectionError(f"chat completion failed: {last}")


_FENCE = re.compile(r"```(?:sql|sqlite)?\s*\n?(.*?)```", re.S | re.I)


def extract_sql(text: str) -> str | None:
    """First fenced code block, else the first line starting with SELECT/WITH."""
    m = _FENCE.search(text)
    if m and m.group(1).strip():
        return m.group(1).strip()
    lines = text.splitlines()
    for i, line in enumerate(lines):
        s = line.strip()
        if re.match(r"(?i)^(select|with)\b", s):
            # a statement may continue on following lines until a blank line
            stmt = [s]
            for nxt in lines[i + 1:]:
                if not nxt.strip():
                    break
                stmt.append(nxt.strip())
            return " ".join(stmt).rstrip(";").strip()
    return None


class LLMBackend:
    def __init__(self, backend_id: str, client: ChatClient, template: str = "text2sql"):
        self.backend_id = backend_id
        self.client = client
        self.template = load_prompt(template)

    def infer(self, req: Text2SqlRequest) -> Text2SqlResponse:
        prompt = self.template.format(schema=req.serialize_schema(), question=req.question)
        t0 = time.monotonic()
        try:
            text = self.client.complete([{"role": "user", "content": prompt}])
        except Exception as exc:
            return Text2SqlResponse("", self.backend_id, time.monotonic() - t0, f"transport: {exc}")
        sql = extract_sql(text)
        if sql is None:
            return Text2SqlResponse("", self.backend_id, time.monotonic() - t0, "no SQL in response")
        return Text2SqlResponse(sql, self.backend_id, time.monotonic() - t0)


# -- caching -------------------------------------------------------------------


class ResponseCache:
    """Key/value store of backend responses; in memory, or an SQLite file when given a path."""

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._mem: dict[str, str] = {}
        self._conn = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._conn = sqlite3.connect(str(path), check_same_thread=False)
            self._conn.execute("CREATE TABLE IF NOT EXISTS responses (key TEXT PRIMARY KEY, value TEXT NOT NULL)")
            self._conn.commit()

    def get(self, key: str) -> str | None:
        with self._lock:
            if key in self._mem:
                return self._mem[key]
            if self._conn is not None:
                row = self._conn.execute("SELECT value FROM responses WHERE key = ?", (key,)).fetchone()
                if row:
                    self._mem[key] = row[0]
                    return row[0]
        return None

    def put(self, key: str, value: str) -> None:
        with self._lock:
            self._mem[key] = value
            if self._conn is not None:
                self._conn.execute("INSERT OR REPLACE INTO responses VALUES (?, ?)", (key, value))
                self._conn.commit()

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None


class CachedBackend:
    """Wraps a backend; identical requests are answered from the cache."""

    def __init__(self, inner: Text2SqlBackend, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id
        self.calls = 0
        self.hits = 0
        self._lock = threading.Lock()

    def infer(self, req: Text2SqlRequest) -> Text2SqlResponse:
        key = req.cache_key(self.backend_id)
        hit = self.cache.get(key)
        if hit is not None:
            d = json.loads(hit)
            with self._lock:
                self.hits += 1
            return Text2SqlResponse(d["sql"], self.backend_id, 0.0, d.get("error"))
        resp = self.inner.infer(req)
        with self._lock:
            self.calls += 1
        # transport failures are not cached so a rerun can retry them
        if resp.error is None or not resp.error.startswith("transport"):
            self.cache.put(key, json.dumps({"sql": resp.predicted_sql, "error": resp.error}))
        return resp


class CountingBackend:
    """Test helper: counts invocations of a wrapped backend."""

    def __init__(self, inner: Text2SqlBackend):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.calls = 0
        self._lock = threading.Lock()

    def infer(self, req: Text2SqlRequest) -> Text2SqlResponse:
        with self._lock:
            self.calls += 1
        return self.inner.infer(req)
