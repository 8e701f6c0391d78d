"""Small bundled databases used by the tests, the docs and ``schemarefine demo``."""
from __future__ import annotations

import json
import sqlite3
from importlib import resources
from pathlib import Path

from .schema import RefinementMapping, load_schema
from .sqlexec import rewrite_identifiers

TINY_COMPANY = "tiny_company"
PROJECTS = "projects"

# degraded name -> readable name, per table
TINY_COMPANY_CLEAN_NAMES = {
    ("employee", "nm"): "employee_name",
    ("employee", "sal"): "salary",
    ("department", "dept_nm"): "department_name",
}


def _script(name: str) -> str:
    return resources.files("schemarefine.data").joinpath(name).read_text(encoding="utf-8")


def _build(script: str, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    conn = sqlite3.connect(path)
    try:
        conn.executescript(script)
        conn.commit()
    finally:
        conn.close()
    return path


def build_tiny_company(dest: str | Path, clean: bool = False) -> Path:
    """Write ``tiny_company.sqlite`` into ``dest``; ``clean`` gives the readable column names."""
    path = _build(_script("tiny_company.sql"), Path(dest) / f"{TINY_COMPANY}.sqlite")
    if clean:
        conn = sqlite3.connect(path)
        try:
            for (table, old), new in TINY_COMPANY_CLEAN_NAMES.items():
                conn.execute(f"ALTER TABLE {table} RENAME COLUMN {old} TO {new}")
            conn.commit()
        finally:
            conn.close()
    return path


def tiny_company_workload(dest: str | Path, clean: bool = False) -> Path:
    """Write the six-item workload as JSON Lines, gold SQL matching the chosen schema."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    records = [json.loads(line) for line in _script("tiny_company.jsonl").splitlines() if line.strip()]
    if clean:
        scratch = build_tiny_company(dest / "_scratch")
        schema = load_schema(scratch)
        mapping = RefinementMapping({schema.column(t, c): n for (t, c), n in TINY_COMPANY_CLEAN_NAMES.items()})
        for r in records:
            r["gold_sql"] = rewrite_identifiers(r["gold_sql"], mapping, schema)
        scratch.unlink()
        scratch.parent.rmdir()
    path = dest / f"{TINY_COMPANY}{'_clean' if clean else ''}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def build_projects(dest: str | Path) -> Path:
    """One primary key (``dept.dno``) referenced by two foreign keys."""
    return _build(_script("projects.sql"), Path(dest) / f"{PROJECTS}.sqlite")
