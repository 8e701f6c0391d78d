from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import pytest

from schemarefine import fixtures
from schemarefine.schema import load_schema


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Fixture:
    db: Path
    workload: Path | None
    digest: str

    def unchanged(self) -> bool:
        return sha256(self.db) == self.digest

    def schema(self, domain: str = ""):
        return load_schema(self.db, domain, self.db.stem)


def _guard(fx: Fixture):
    yield fx
    # every test that touches a fixture database must leave it byte-identical
    assert fx.unchanged(), f"{fx.db} was modified"


@pytest.fixture
def tiny(tmp_path):
    db = fixtures.build_tiny_company(tmp_path / "db")
    wl = fixtures.tiny_company_workload(tmp_path / "db")
    yield from _guard(Fixture(db, wl, sha256(db)))


@pytest.fixture
def tiny_clean(tmp_path):
    db = fixtures.build_tiny_company(tmp_path / "clean", clean=True)
    wl = fixtures.tiny_company_workload(tmp_path / "clean", clean=True)
    yield from _guard(Fixture(db, wl, sha256(db)))


@pytest.fixture
def projects(tmp_path):
    db = fixtures.build_projects(tmp_path / "proj")
    yield from _guard(Fixture(db, None, sha256(db)))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import summary_lines
    except ImportError:
        return
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
