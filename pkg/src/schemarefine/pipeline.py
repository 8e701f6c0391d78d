"""End-to-end orchestration: configuration, per-database runs, tau sweeps."""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .backends import (ChatClient, CachedBackend, EndpointConfig, LLMBackend, MockBackend, ResponseCache,
                       Text2SqlBackend)
from .candidates import DEFAULT_K, DEFAULT_N_SAMPLES, DictionaryGenerator, LLMGenerator, build_context, generate
from .conflict import ConflictPlan, resolve
from .reports import coverage, flips, funnel, write_report
from .schema import SchemaModel, load_schema
from .screening import LLMScreener, RuleScreener, screen, structural_exclusions, verdicts_to_json
from .sqlexec import ExecutableSchema
from .synthesis import build_view_layer, equivalence_check, propagate_pk_renames, synthesize_views, write_artifacts
from .verifier import (COMMITTED, DEFAULT_TAU_MIN, RefinementDecision, ScoreLog, decide, mean_scores,
                       predicted_inference_count, records_from_log, verify_column)
from .workload import GoldCache, WorkloadItem, column_query_index, evaluate, ingest_workload

log = logging.getLogger(__name__)

PHASES = (
    "load", "ingest", "screen", "structural-exclude", "generate-verify", "commit-filter",
    "conflict-resolve", "propagate-pk", "synthesize", "equivalence", "report",
)


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, message: str, db_id: str, last_good_phase: str | None):
        super().__init__(message)
        self.db_id = db_id
        self.last_good_phase = last_good_phase


@dataclass
class RunConfig:
    databases: list[Path]
    workload: Path
    seed: int
    output_dir: Path
    verifiers: list[str] = field(default_factory=lambda: ["mock"])
    screener: str = "rules"
    generator: str = "dictionary"
    k: int = DEFAULT_K
    n_samples: int = DEFAULT_N_SAMPLES
    tau_min: float = DEFAULT_TAU_MIN
    parallelism: int = 1
    cache_dir: Path | None = None
    timeout: float = 30.0
    domain_description: str = ""
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)

    def __post_init__(self):
        self.databases = [Path(p) for p in self.databases]
        self.workload = Path(self.workload)
        self.output_dir = Path(self.output_dir)
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
        if not self.databases:
            raise ConfigError("at least one database is required")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if not self.tau_min >= 0:
            raise ConfigError("tau_min must be non-negative")
        if not self.verifiers:
            raise ConfigError("the verifier list must not be empty")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")

    @property
    def cache_path(self) -> Path:
        return (self.cache_dir or self.output_dir / "cache") / "responses.sqlite"

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> RunConfig:
        """Read an INI file; relative paths resolve against the file's directory.

        ``[pipeline]`` holds the run settings; each ``[endpoint.<id>]`` section
        declares an HTTP chat backend usable as a verifier, ``llm:<id>``
        screener or ``llm:<id>`` generator.
        """
        path = Path(path)
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
        if "pipeline" not in cp:
            raise ConfigError("config needs a [pipeline] section")
        sec = cp["pipeline"]
        here = path.parent

        def p(value: str) -> Path:
            q = Path(value).expanduser()
            return q if q.is_absolute() else here / q

        if "seed" not in sec and overrides.get("seed") is None:
            raise ConfigError("seed is mandatory in the config for reproducibility")
        kw = {
            "databases": [p(x) for x in sec.get("databases", sec.get("database", "")).split()],
            "workload": p(sec.get("workload", "")),
            "seed": sec.getint("seed") if "seed" in sec else None,
            "output_dir": p(sec.get("output_dir", "run")),
            "verifiers": [v.strip() for v in sec.get("verifiers", "mock").split(",") if v.strip()],
            "screener": sec.get("screener", "rules"),
            "generator": sec.get("generator", "dictionary"),
            "k": sec.getint("k", DEFAULT_K),
            "n_samples": sec.getint("n_samples", DEFAULT_N_SAMPLES),
            "tau_min": float(sec.get("tau_min", DEFAULT_TAU_MIN)),
            "parallelism": sec.getint("parallelism", 1),
            "cache_dir": p(sec["cache_dir"]) if sec.get("cache_dir") else None,
            "timeout": sec.getfloat("timeout", 30.0),
            "domain_description": sec.get("domain_description", ""),
        }
        endpoints = {}
        for name in cp.sections():
            if name.startswith("endpoint."):
                e = cp[name]
                endpoints[name.split(".", 1)[1]] = EndpointConfig(
                    e["base_url"], e["model"], e.get("api_key_env", "OPENAI_API_KEY") or None,
                    e.getfloat("timeout", 60.0), e.getint("max_retries", 1), e.getint("max_in_flight", 8),
                    e.getfloat("temperature", 0.0))
        kw["endpoints"] = endpoints
        kw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("seed", "verifiers", "screener", "generator", "k", "n_samples",
                                            "parallelism", "timeout", "domain_description")}
        d["tau_min"] = self.tau_min if math.isfinite(self.tau_min) else "inf"
        d["databases"] = [str(x) for x in self.databases]
        d["workload"] = str(self.workload)
        d["endpoints"] = {k: {"base_url": v.base_url, "model": v.model} for k, v in self.endpoints.items()}
        return d


# -- plugin registry ---------------------------------------------------------


def _endpoint(config: RunConfig, ident: str) -> EndpointConfig:
    if ident not in config.endpoints:
        raise ConfigError(f"no [endpoint.{ident}] section for backend {ident!r}")
    return config.endpoints[ident]


def make_verifiers(config: RunConfig, cache: ResponseCache) -> list[CachedBackend]:
    out = []
    for ident in config.verifiers:
        inner = MockBackend() if ident == "mock" else LLMBackend(ident, ChatClient(_endpoint(config, ident)))
        out.append(CachedBackend(inner, cache))
    return out


def make_screener(config: RunConfig):
    if config.screener == "rules":
        return RuleScreener()
    if config.screener.startswith("llm:"):
        return LLMScreener(ChatClient(_endpoint(config, config.screener[4:])))
    raise ConfigError(f"unknown screener {config.screener!r}")


def make_generator(config: RunConfig):
    if config.generator == "dictionary":
        return DictionaryGenerator()
    if config.generator.startswith("llm:"):
        return LLMGenerator(ChatClient(_endpoint(config, config.generator[4:])))
    raise ConfigError(f"unknown generator {config.generator!r}")


# -- persistence helpers -------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


class Trace:
    """Phase entry/exit log plus a state file naming the last completed phase."""

    def __init__(self, run_dir: Path, db_id: str):
        self.path = run_dir / "trace.jsonl"
        self.state = run_dir / "state.json"
        self.db_id = db_id
        self.last_good: str | None = None
        self.path.write_text("", encoding="utf-8")

    def _emit(self, phase: str, event: str, **extra) -> None:
        rec = {"db_id": self.db_id, "phase": phase, "event": event, "time": time.time(), **extra}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, default=str) + "\n")

    def run(self, phase: str, fn: Callable, *args, **kwargs):
        self._emit(phase, "enter")
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            self._emit(phase, "error", error=f"{type(exc).__name__}: {exc}")
            _dump(self.state, {"db_id": self.db_id, "last_good_phase": self.last_good, "failed_phase": phase,
                               "error": str(exc)})
            raise PipelineError(f"{self.db_id}: phase {phase} failed: {exc}", self.db_id, self.last_good) from exc
        self._emit(phase, "exit")
        self.last_good = phase
        _dump(self.state, {"db_id": self.db_id, "last_good_phase": phase})
        return out

    @staticmethod
    def phases(path: str | Path) -> list[tuple[str, str]]:
        with open(path, encoding="utf-8") as fh:
            return [(r["phase"], r["event"]) for r in map(json.loads, fh) if r]


# -- the run -------------------------------------------------------------------


@dataclass
class DbRun:
    db_id: str
    run_dir: Path
    schema: SchemaModel
    decisions: list[RefinementDecision]
    plan: ConflictPlan
    report: dict
    discrepancies: int
    predicted_inferences: int
    logged_inferences: int
    backend_calls: int


@dataclass
class RunResult:
    output_dir: Path
    databases: list[DbRun]

    @property
    def exit_code(self) -> int:
        return 2 if any(d.discrepancies for d in self.databases) else 0


def _quality(models, view, items, gold, parallelism) -> tuple[float, dict]:
    per_model = {}
    for m in models:
        per_model[m.backend_id] = evaluate(m, view, items, gold, parallelism)
    acc = [sum(o.correct for o in v) / len(v) for v in per_model.values()] if items else []
    return (sum(acc) / len(acc) if acc else 0.0), per_model


def run_database(config: RunConfig, db_path: Path, models: Sequence[Text2SqlBackend], *,
                 screener=None, generator=None) -> DbRun:
    db_id = db_path.stem
    run_dir = config.output_dir / db_id
    run_dir.mkdir(parents=True, exist_ok=True)
    trace = Trace(run_dir, db_id)
    screener = screener or make_screener(config)
    generator = generator or make_generator(config)
    calls_before = sum(getattr(m, "calls", 0) for m in models)

    before_hash = file_sha256(db_path)
    schema = trace.run("load", load_schema, db_path, config.domain_description, db_id)
    base = ExecutableSchema(db_path, None, schema)
    items: list[WorkloadItem] = trace.run("ingest", ingest_workload, config.workload, schema, timeout=config.timeout)
    gold = GoldCache(config.timeout)

    def phase_screen():
        exclusions = structural_exclusions(schema)
        verdicts = screen(schema, screener, base.sample_rows, exclusions, config.parallelism)
        _dump(run_dir / "screening.json", verdicts_to_json(verdicts, exclusions))
        return exclusions, verdicts

    exclusions, verdicts = trace.run("screen", phase_screen)

    def phase_exclude():
        # screening already skipped excluded columns; this enforces A := A minus exclusions
        return [v.column for v in verdicts if v.flagged and v.column not in exclusions]

    flagged = trace.run("structural-exclude", phase_exclude)
    index = column_query_index(items, schema)

    def phase_verify():
        score_path = run_dir / "scores.jsonl"
        score_path.write_text("", encoding="utf-8")
        score_log = ScoreLog(score_path, db_id)
        decisions, cand_sets = [], []
        conn = base.connect()
        try:
            for c in flagged:
                ctx = build_context(schema, c, conn, config.seed, config.n_samples)
                cand_sets.append(generate(ctx, generator, config.k, schema, c))
        finally:
            conn.close()
        q_sizes = [len(index.get(cs.column, [])) for cs in cand_sets]
        predicted = predicted_inference_count(len(cand_sets), config.k, len(models), q_sizes,
                                              [len(cs.augmented) for cs in cand_sets])
        for cs in cand_sets:
            d, _ = verify_column(schema, cs, index.get(cs.column, []), models, config.tau_min, gold=gold,
                                 score_log=score_log, parallelism=config.parallelism, timeout=config.timeout)
            decisions.append(d)
        _dump(run_dir / "candidates.json", [
            {"table": cs.column.table, "column": cs.column.name, "generator": cs.generator,
             "augmented": cs.augmented, "rejected": cs.rejected, "q_size": q}
            for cs, q in zip(cand_sets, q_sizes)])
        _dump(run_dir / "decisions.json", [d.to_json() for d in decisions])
        _dump(run_dir / "cost.json", {"predicted_inferences": predicted, "logged_inferences": score_log.lines})
        return decisions, predicted, score_log.lines

    decisions, predicted, logged = trace.run("generate-verify", phase_verify)
    committed = trace.run("commit-filter", lambda: [d for d in decisions if d.status == COMMITTED])
    log.info("%s: %d of %d screened columns committed", db_id, len(committed), len(decisions))
    plan = trace.run("conflict-resolve", resolve, decisions, schema)
    plan = trace.run("propagate-pk", propagate_pk_renames, plan, schema)

    def phase_synth():
        layer = synthesize_views(plan, schema, run_dir / "views.db")
        write_artifacts(plan, layer, run_dir)
        return layer

    layer = trace.run("synthesize", phase_synth)

    def phase_equiv():
        rep = equivalence_check(layer, items, schema, config.parallelism, config.timeout)
        _dump(run_dir / "equivalence.json", rep.to_json())
        return rep

    equivalence = trace.run("equivalence", phase_equiv)

    def phase_report():
        view = ExecutableSchema(db_path, layer, schema)
        q_before, out_before = _quality(models, base, items, gold, config.parallelism)
        q_after, out_after = _quality(models, view, items, gold, config.parallelism)
        before = {f"{m}:{o.qid}": o.correct for m, os in out_before.items() for o in os}
        after = {f"{m}:{o.qid}": o.correct for m, os in out_after.items() for o in os}
        fun = funnel(len(schema.columns), len(exclusions), len(flagged), decisions, plan.final)
        final_rows = {(r["table"], r["column"]): r for r in plan.to_json()}
        dec_rows = []
        for d in decisions:
            row = d.to_json()
            row["final_name"] = final_rows[(d.column.table, d.column.name)]["final_name"]
            row["provenance"] = final_rows[(d.column.table, d.column.name)]["provenance"]
            dec_rows.append(row)
        report = {
            "db_id": db_id,
            "config": config.to_json(),
            "funnel": fun.to_json(),
            "quality": {"base": q_before, "refined": q_after},
            "flips": flips(before, after).to_json(),
            "decisions": dec_rows,
            "conflict": {"iterations": plan.iterations, "notes": plan.notes},
            "propagation": {pk.qualified: [f.qualified for f in fs] for pk, fs in plan.propagation.items()},
            "equivalence": equivalence.to_json(),
            "cost": {"predicted_inferences": predicted, "logged_inferences": logged},
            "workload_items": len(items),
        }
        write_report(report, run_dir)
        return report

    report = trace.run("report", phase_report)
    after_hash = file_sha256(db_path)
    if after_hash != before_hash:
        raise PipelineError(f"{db_id}: base database changed during the run", db_id, trace.last_good)
    calls = sum(getattr(m, "calls", 0) for m in models) - calls_before
    return DbRun(db_id, run_dir, schema, decisions, plan, report, len(equivalence.discrepancies),
                 predicted, logged, calls)


def run_pipeline(config: RunConfig, models: Sequence[Text2SqlBackend] | None = None, *,
                 screener=None, generator=None) -> RunResult:
    """Refine every configured database independently and write an aggregate report."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    cache = None
    if models is None:
        cache = ResponseCache(config.cache_path)
        models = make_verifiers(config, cache)
    try:
        runs = [run_database(config, Path(db), models, screener=screener, generator=generator)
                for db in config.databases]
    finally:
        if cache is not None:
            cache.close()
    rows = [(r.db_id, r.report["funnel"]["n_r"], r.report["funnel"]["m"],
             r.report["quality"]["refined"] - r.report["quality"]["base"]) for r in runs]
    aggregate = {
        "databases": [r.db_id for r in runs],
        "coverage": [c.to_json() for c in coverage(rows)],
        "discrepancies": sum(r.discrepancies for r in runs),
    }
    write_report(aggregate, config.output_dir)
    return RunResult(config.output_dir, runs)


# -- tau sweep --------------------------------------------------------------------


def decisions_from_run(run_dir: str | Path, schema: SchemaModel, tau_min: float) -> list[RefinementDecision]:
    """Recompute every decision at ``tau_min`` from the run's ScoreLog; no inference."""
    run_dir = Path(run_dir)
    cand_path, score_path = run_dir / "candidates.json", run_dir / "scores.jsonl"
    if not cand_path.exists() or not score_path.exists():
        raise FileNotFoundError(f"no cached scores in {run_dir}; run the refine step first")
    cands = json.loads(cand_path.read_text(encoding="utf-8"))
    records = records_from_log(ScoreLog.read(score_path), schema)
    out = []
    for cs in cands:
        c = schema.column(cs["table"], cs["column"])
        recs = records.get(c, [])
        n_q = len(recs[0].outcomes) if recs else 0
        out.append(decide(c, cs["augmented"], mean_scores(recs, cs["augmented"]), tau_min, n_q))
    return out


def sweep_tau(config: RunConfig, taus: Iterable[float], models: Sequence[Text2SqlBackend] | None = None,
              with_exacc: bool = True) -> list[dict]:
    """Per-tau committed counts (and ExAcc of the resolved plan) replayed from a finished run."""
    taus = list(taus)
    cache = None
    if with_exacc and models is None:
        if not config.cache_path.exists():
            raise FileNotFoundError(f"no response cache at {config.cache_path}; run the refine step first")
        cache = ResponseCache(config.cache_path)
        models = make_verifiers(config, cache)
    rows = []
    try:
        for db in config.databases:
            db = Path(db)
            schema = load_schema(db, config.domain_description, db.stem)
            run_dir = config.output_dir / db.stem
            items = ingest_workload(config.workload, schema, timeout=config.timeout) if with_exacc else []
            gold = GoldCache(config.timeout)
            for tau in taus:
                decisions = decisions_from_run(run_dir, schema, tau)
                plan = propagate_pk_renames(resolve(decisions, schema), schema)
                row = {"db_id": db.stem, "tau_min": tau,
                       "committed": sum(d.status == COMMITTED for d in decisions),
                       "refined": len(plan.committed_columns())}
                if with_exacc and items:
                    calls = sum(getattr(m, "calls", 0) for m in models)
                    view = ExecutableSchema(db, build_view_layer(schema, plan.mapping), schema)
                    row["exacc"] = _quality(models, view, items, gold, config.parallelism)[0]
                    row["new_inferences"] = sum(getattr(m, "calls", 0) for m in models) - calls
                rows.append(row)
    finally:
        if cache is not None:
            cache.close()
    return rows


__all__ = ["RunConfig", "RunResult", "DbRun", "run_pipeline", "run_database", "sweep_tau", "decisions_from_run",
           "ConfigError", "PipelineError", "PHASES", "Trace", "file_sha256"]
