"""Command-line entry point: ``schemarefine <verb>``.

Exit codes: 0 success, 2 equivalence discrepancies found, 1 hard error.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import fixtures
from .backends import ChatClient, LLMBackend, MockBackend
from .pipeline import ConfigError, PipelineError, RunConfig, run_pipeline, sweep_tau
from .reports import render_text, text_table
from .schema import SchemaError, load_schema
from .sqlexec import ExecutableSchema
from .synthesis import SynthesisError, equivalence_check, load_view_layer
from .workload import WorkloadError, ingest_workload, quality

EXIT_OK, EXIT_ERROR, EXIT_DISCREPANCY = 0, 1, 2
_EXPECTED = (ConfigError, PipelineError, SchemaError, SynthesisError, WorkloadError, FileNotFoundError)


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_ERROR)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Execution-grounded column renaming for SQLite schemas, delivered as views."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau-min", type=float, help="Override the commit threshold.")
@click.option("--output-dir", type=click.Path(file_okay=False), help="Override the run directory.")
@click.option("--seed", type=int, help="Override the seed.")
@click.option("--parallelism", type=int, help="Override the worker count.")
def refine(config_path, tau_min, output_dir, seed, parallelism):
    """Run the full pipeline and write views, mapping, logs and reports."""
    try:
        cfg = RunConfig.from_file(config_path, tau_min=tau_min, output_dir=output_dir, seed=seed,
                                  parallelism=parallelism)
        result = run_pipeline(cfg)
    except _EXPECTED as exc:
        _fail(exc)
    for r in result.databases:
        f = r.report["funnel"]
        q = r.report["quality"]
        click.echo(f"{r.db_id}: m={f['m']} n={f['n']} n_r={f['n_r']} "
                   f"exacc {q['base']:.4f} -> {q['refined']:.4f}, "
                   f"{r.discrepancies} discrepancies, views at {r.run_dir / 'views.db'}")
    sys.exit(result.exit_code)


@main.command("verify-equivalence")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--views", "views_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workload", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print the full report as JSON.")
def verify_equivalence(db_path, views_path, workload, as_json):
    """Check that every gold query returns the same rows through the view layer."""
    try:
        schema = load_schema(db_path, db_id=Path(db_path).stem)
        layer = load_view_layer(views_path, schema)
        items = ingest_workload(workload, schema)
        rep = equivalence_check(layer, items, schema)
    except _EXPECTED as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps(rep.to_json(), indent=2))
    else:
        click.echo(f"{rep.checked} queries checked, {len(rep.discrepancies)} discrepancies")
        for d in rep.discrepancies:
            click.echo(f"  {d.qid} [{d.kind}] {d.detail}")
    sys.exit(EXIT_OK if rep.ok else EXIT_DISCREPANCY)


def _parse_taus(values) -> list[float]:
    out = []
    for v in values:
        out.extend(float(x) for x in str(v).split(",") if x.strip())
    return out


@main.command("sweep-tau")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", "taus", multiple=True, required=True, help="Threshold(s); repeat or comma-separate.")
@click.option("--no-exacc", is_flag=True, help="Only recompute decisions.")
def sweep_tau_cmd(config_path, taus, no_exacc):
    """Recompute decisions per threshold from a finished run's score log."""
    try:
        cfg = RunConfig.from_file(config_path)
        rows = sweep_tau(cfg, _parse_taus(taus), with_exacc=not no_exacc)
    except _EXPECTED as exc:
        _fail(exc)
    headers = ["db", "tau_min", "committed", "refined"] + ([] if no_exacc else ["exacc", "new inferences"])
    click.echo(text_table(headers, [[r["db_id"], r["tau_min"], r["committed"], r["refined"],
                                     *([] if no_exacc else [r.get("exacc"), r.get("new_inferences")])]
                                    for r in rows]))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--json", "as_json", is_flag=True)
def report(run_dir, as_json):
    """Print the report of a finished run (a database subdirectory or the top level)."""
    path = Path(run_dir) / "report.json"
    if not path.exists():
        _fail(FileNotFoundError(f"{path} not found"))
    data = json.loads(path.read_text(encoding="utf-8"))
    click.echo(json.dumps(data, indent=2) if as_json else render_text(data).rstrip("\n"))


@main.command("eval")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workload", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--views", "views_path", type=click.Path(exists=True, dir_okay=False),
              help="Evaluate through this view layer; gold SQL stays in base names.")
@click.option("--backend", "backend_ids", multiple=True, default=("mock",), show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Config declaring [endpoint.<id>] sections for non-mock backends.")
def eval_cmd(db_path, workload, views_path, backend_ids, config_path):
    """Execution accuracy of one or more backends on a database or view layer."""
    try:
        schema = load_schema(db_path, db_id=Path(db_path).stem)
        items = ingest_workload(workload, schema)
        if not items:
            raise WorkloadError("no workload items for this database")
        layer = load_view_layer(views_path, schema) if views_path else None
        endpoints = RunConfig.from_file(config_path, seed=0).endpoints if config_path else {}
        models = []
        for b in backend_ids:
            if b == "mock":
                models.append(MockBackend())
            elif b in endpoints:
                models.append(LLMBackend(b, ChatClient(endpoints[b])))
            else:
                raise ConfigError(f"unknown backend {b!r}; declare it in an [endpoint.{b}] section")
        rep = quality(models, ExecutableSchema(db_path, layer, schema), items)
    except _EXPECTED as exc:
        _fail(exc)
    for b, v in rep.per_model.items():
        click.echo(f"{b}: {v:.4f}")
    click.echo(f"quality: {rep.quality:.4f} over {len(items)} items")


@main.command()
@click.argument("dest", type=click.Path(file_okay=False))
def demo(dest):
    """Write the tiny_company fixture, its workload and a ready-to-run config."""
    dest = Path(dest)
    db = fixtures.build_tiny_company(dest)
    wl = fixtures.tiny_company_workload(dest)
    cfg = dest / "refine.ini"
    cfg.write_text(
        "[pipeline]\n"
        f"databases = {db.name}\n"
        f"workload = {wl.name}\n"
        "seed = 0\n"
        "output_dir = run\n"
        "verifiers = mock\n"
        "screener = rules\n"
        "generator = dictionary\n"
        "k = 3\n"
        "tau_min = 0.05\n"
        "domain_description = Staff and departments of a small company.\n",
        encoding="utf-8",
    )
    click.echo(f"wrote {db}, {wl} and {cfg}")
    click.echo(f"next: schemarefine refine --config {cfg}")


def run(argv: list[str] | None = None) -> None:
    """Console entry point; usage errors exit 1 so that 2 always means discrepancies."""
    try:
        rv = main.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_ERROR)
    except click.Abort:
        click.echo("aborted", err=True)
        sys.exit(EXIT_ERROR)
    sys.exit(rv if isinstance(rv, int) else EXIT_OK)


if __name__ == "__main__":
    run()
