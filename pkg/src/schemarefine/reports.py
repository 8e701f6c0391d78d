"""Run analytics: screening funnel, flip buckets, per-database coverage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .schema import ColumnRef
from .verifier import COMMITTED, RefinementDecision

UNDEFINED = None  # marker for ratios whose denominator is zero


@dataclass
class FunnelReport:
    m: int
    excluded: int
    unflagged: int
    n: int
    n_r: int
    mean_delta: float | None

    def __post_init__(self):
        if self.m != self.excluded + self.unflagged + self.n:
            raise ValueError(f"funnel does not add up: {self.m} != {self.excluded} + {self.unflagged} + {self.n}")
        if not 0 <= self.n_r <= self.n <= self.m:
            raise ValueError("need n_r <= n <= m")

    @property
    def exclusion_rate(self) -> float:
        """Share of all columns that never reach Phase 2 (excluded or unflagged)."""
        return 1 - self.n / self.m if self.m else 0.0

    @property
    def compression(self) -> float:
        return self.n_r / self.m if self.m else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["exclusion_rate"] = self.exclusion_rate
        d["compression"] = self.compression
        return d


def refined_delta(d: RefinementDecision, final_name: str) -> float:
    """Score gain of the name a column finally carries (it may be a runner-up)."""
    return d.scores[final_name] - d.scores[d.original]


def funnel(m: int, excluded: int, flagged: int, decisions: Sequence[RefinementDecision],
           final: Mapping[ColumnRef, str]) -> FunnelReport:
    """Counts from a completed run; ``final`` is the post-conflict name per decided column."""
    refined = [d for d in decisions if d.status == COMMITTED and final.get(d.column, d.original) != d.original]
    deltas = [refined_delta(d, final[d.column]) for d in refined]
    mean = sum(deltas) / len(deltas) if deltas else UNDEFINED
    return FunnelReport(m, excluded, m - excluded - flagged, flagged, len(refined), mean)


@dataclass
class FlipReport:
    cc: int
    cw: int
    wc: int
    ww: int
    changed: list[tuple[str, str]] = field(default_factory=list)  # (qid, bucket) for flips

    @property
    def total(self) -> int:
        return self.cc + self.cw + self.wc + self.ww

    @property
    def ratio(self) -> float | None:
        """Repairs per break (W->C : C->W)."""
        return self.wc / self.cw if self.cw else UNDEFINED

    def to_json(self) -> dict:
        return {"C->C": self.cc, "C->W": self.cw, "W->C": self.wc, "W->W": self.ww,
                "repair_break_ratio": self.ratio, "flips": [list(x) for x in self.changed]}


def _as_map(outcomes) -> dict[str, bool]:
    if isinstance(outcomes, Mapping):
        return {str(k): bool(v) for k, v in outcomes.items()}
    out = {}
    for o in outcomes:
        if o.qid in out:
            raise ValueError(f"duplicate query id {o.qid!r}")
        out[o.qid] = bool(o.correct)
    return out


def flips(before, after) -> FlipReport:
    """Bucket per-query correctness before and after refinement.

    Accepts ``{qid: correct}`` mappings or sequences of ``ItemOutcome``.
    """
    b, a = _as_map(before), _as_map(after)
    if b.keys() != a.keys():
        raise ValueError(f"query sets differ: {sorted(b.keys() ^ a.keys())[:5]}")
    rep = FlipReport(0, 0, 0, 0)
    for qid in sorted(b):
        x, y = b[qid], a[qid]
        if x and y:
            rep.cc += 1
        elif x:
            rep.cw += 1
            rep.changed.append((qid, "C->W"))
        elif y:
            rep.wc += 1
            rep.changed.append((qid, "W->C"))
        else:
            rep.ww += 1
    return rep


@dataclass
class CoverageRow:
    db_id: str
    n_r: int
    m: int
    delta: float

    @property
    def coverage(self) -> float:
        return self.n_r / self.m if self.m else 0.0

    @property
    def consistent(self) -> bool:
        """Zero commits leave the schema byte-identical, so the gain must be exactly zero."""
        return self.n_r > 0 or self.delta == 0

    def to_json(self) -> dict:
        return {"db_id": self.db_id, "n_r": self.n_r, "m": self.m, "coverage": self.coverage,
                "delta": self.delta, "consistent": self.consistent}


def coverage(rows: Sequence[tuple[str, int, int, float]]) -> list[CoverageRow]:
    """Per-database ``(db_id, n_r, m, delta)`` to coverage rows, sorted by db_id."""
    return sorted((CoverageRow(*r) for r in rows), key=lambda r: r.db_id)


# -- rendering ---------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def text_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_text(report: Mapping) -> str:
    """Human-readable version of a run report (the dict written to report.json)."""
    parts = []
    f = report.get("funnel")
    if f:
        parts.append("Screening funnel")
        parts.append(text_table(
            ["m", "excluded", "unflagged", "n", "n_r", "exclusion", "compression", "mean delta"],
            [[f["m"], f["excluded"], f["unflagged"], f["n"], f["n_r"], f["exclusion_rate"],
              f["compression"], f["mean_delta"]]]))
    q = report.get("quality")
    if q:
        parts.append("\nExecution accuracy")
        parts.append(text_table(["schema", "quality"], [[k, v] for k, v in q.items()]))
    fl = report.get("flips")
    if fl:
        parts.append("\nFlips")
        parts.append(text_table(["C->C", "C->W", "W->C", "W->W", "repairs:breaks"],
                                [[fl["C->C"], fl["C->W"], fl["W->C"], fl["W->W"], fl["repair_break_ratio"]]]))
    dec = report.get("decisions")
    if dec:
        parts.append("\nDecisions")
        parts.append(text_table(["column", "status", "selected", "final", "delta"],
                                [[f"{d['table']}.{d['column']}", d["status"], d["selected"],
                                  d.get("final_name", d["selected"]), d["delta"]] for d in dec]))
    eq = report.get("equivalence")
    if eq:
        parts.append(f"\nEquivalence: {eq['checked']} queries checked, {len(eq['discrepancies'])} discrepancies")
    cov = report.get("coverage")
    if cov:
        parts.append("\nCoverage")
        parts.append(text_table(["db", "n_r", "m", "coverage", "delta"],
                                [[r["db_id"], r["n_r"], r["m"], r["coverage"], r["delta"]] for r in cov]))
    return "\n".join(parts) + "\n"


def write_report(report: Mapping, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(render_text(report), encoding="utf-8")
