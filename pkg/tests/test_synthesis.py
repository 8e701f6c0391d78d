from __future__ import annotations

import sqlite3

import pytest

from schemarefine.conflict import KEPT, PROPAGATED, REVERTED, UNCHANGED, ConflictPlan
from schemarefine.schema import RefinementMapping, SchemaError, check_admissible, load_schema
from schemarefine.sqlexec import ExecutableSchema, execute, results_equal
from schemarefine.synthesis import (SynthesisError, ViewLayer, build_view_layer, equivalence_check, load_view_layer,
                                    propagate_pk_renames, sidecar_base_path, synthesize_views, view_ddl)
from schemarefine.workload import WorkloadItem, ingest_workload

TINY_MAP = {("employee", "nm"): "employee_name", ("employee", "sal"): "employee_salary",
            ("department", "dept_nm"): "department_name"}


def mapping(schema, names):
    return RefinementMapping({schema.column(t, c): n for (t, c), n in names.items()})


def plan_for(schema, names):
    final = {c: c.name for c in schema.columns}
    prov = {c: UNCHANGED for c in schema.columns}
    for (t, c), n in names.items():
        final[schema.column(t, c)] = n
        prov[schema.column(t, c)] = KEPT
    return ConflictPlan(final, prov)


def test_identity_ddl(tiny):
    s = tiny.schema()
    assert view_ddl(s, RefinementMapping()) == [
        "CREATE TEMP VIEW department AS SELECT dept_id AS dept_id, dept_nm AS dept_nm FROM base.department",
        "CREATE TEMP VIEW employee AS SELECT emp_id AS emp_id, nm AS nm, sal AS sal, dept_id AS dept_id "
        "FROM base.employee",
    ]


def test_ddl_is_deterministic_and_quotes_reserved_words(tiny):
    s = tiny.schema()
    m = RefinementMapping({s.column("employee", "nm"): "order"})
    assert view_ddl(s, m) == view_ddl(s, m)
    assert 'nm AS "order"' in view_ddl(s, m)[1]
    view = ExecutableSchema(tiny.db, build_view_layer(s, m), s)
    assert execute(view, 'SELECT "order" FROM employee WHERE emp_id = 2').rows == (("Bob",),)


def test_inadmissible_mapping_is_refused(tiny):
    s = tiny.schema()
    with pytest.raises(SchemaError):
        build_view_layer(s, RefinementMapping({s.column("employee", "nm"): "sal"}))


def test_propagation_pk_to_fks(projects):
    s = projects.schema()
    plan = propagate_pk_renames(plan_for(s, {("dept", "dno"): "department_number"}), s)
    pk = s.column("dept", "dno")
    assert plan.propagation == {pk: [s.column("employee", "dno"), s.column("project", "dno")]}
    assert plan.final[s.column("project", "dno")] == "department_number"
    assert plan.provenance[s.column("employee", "dno")] == PROPAGATED
    assert plan.committed_columns() == [pk]
    assert check_admissible(s, plan.mapping).ok


def test_non_pk_rename_does_not_propagate(projects):
    s = projects.schema()
    plan = propagate_pk_renames(plan_for(s, {("dept", "dname"): "department_name"}), s)
    assert plan.propagation == {} and plan.mapping.changed() == {s.column("dept", "dname"): "department_name"}


def test_pk_without_references(tiny):
    s = tiny.schema()
    plan = propagate_pk_renames(plan_for(s, {("employee", "emp_id"): "employee_id"}), s)
    assert plan.propagation == {} and plan.final[s.column("employee", "emp_id")] == "employee_id"


def test_colliding_propagation_rolls_back(projects):
    s = projects.schema()
    plan = propagate_pk_renames(plan_for(s, {("dept", "dno"): "ename"}), s)
    assert plan.final[s.column("dept", "dno")] == "dno"
    assert plan.provenance[s.column("dept", "dno")] == REVERTED
    assert plan.mapping.is_identity() and "rolled back" in plan.notes[0]


def test_propagation_follows_chains(tmp_path):
    db = tmp_path / "chain.sqlite"
    with sqlite3.connect(db) as conn:
        conn.executescript("""
            CREATE TABLE a (id INTEGER PRIMARY KEY);
            CREATE TABLE b (aid INTEGER PRIMARY KEY REFERENCES a(id));
            CREATE TABLE c (bid INTEGER REFERENCES b(aid));
        """)
    s = load_schema(db)
    plan = propagate_pk_renames(plan_for(s, {("a", "id"): "alpha_id"}), s)
    assert {c.qualified: n for c, n in plan.mapping.changed().items()} == {
        "a.id": "alpha_id", "b.aid": "alpha_id", "c.bid": "alpha_id"}


def test_sidecar_round_trip(tiny, tmp_path):
    s = tiny.schema()
    m = mapping(s, TINY_MAP)
    out = tmp_path / "out" / "views.db"
    layer = synthesize_views(m, s, out)
    again = synthesize_views(m, s, out)  # rewriting in place is fine
    assert again.ddl == layer.ddl
    loaded = load_view_layer(out, s)
    assert loaded.ddl == layer.ddl and loaded.mapping.changed() == m.changed()
    assert sidecar_base_path(out) == tiny.db.resolve()
    view = ExecutableSchema(tiny.db, loaded, s)
    for _ in range(2):  # views are replayed on every connection
        assert execute(view, "SELECT COUNT(employee_salary) FROM employee").rows == ((4,),)


def test_refuses_to_overwrite_base(tiny):
    s = tiny.schema()
    with pytest.raises(SynthesisError):
        synthesize_views(RefinementMapping(), s, tiny.db)


def test_equivalence_on_tiny(tiny):
    s = tiny.schema()
    items = ingest_workload(tiny.workload, s)
    rep = equivalence_check(build_view_layer(s, mapping(s, TINY_MAP)), items, s, parallelism=2)
    assert rep.ok and rep.checked == 6 and rep.skipped == []


def test_swapped_aliases_are_caught(tiny):
    s = tiny.schema()
    m = mapping(s, {("employee", "nm"): "employee_name", ("employee", "sal"): "employee_salary"})
    good = build_view_layer(s, m)
    bad_ddl = [d.replace("nm AS employee_name, sal AS employee_salary",
                         "sal AS employee_name, nm AS employee_salary") for d in good.ddl]
    assert bad_ddl != good.ddl
    rep = equivalence_check(ViewLayer(m, bad_ddl), ingest_workload(tiny.workload, s), s)
    assert {d.qid for d in rep.discrepancies} == {"W1", "W2", "W3", "W4"}
    assert all(d.kind == "result-mismatch" for d in rep.discrepancies)


def test_broken_gold_is_skipped_and_missing_view_is_reported(tiny):
    s = tiny.schema()
    items = [WorkloadItem("q", "SELECT ghost FROM employee", "tiny_company", qid="g"),
             WorkloadItem("q", "SELECT nm FROM employee", "tiny_company", qid="h")]
    # the mapping promises employee_name but the DDL never defines it
    layer = ViewLayer(mapping(s, {("employee", "nm"): "employee_name"}), view_ddl(s, RefinementMapping()))
    rep = equivalence_check(layer, items, s)
    assert rep.skipped[0][0] == "g"
    assert [d.kind for d in rep.discrepancies] == ["view-error"]


def test_projects_join_equivalence(projects):
    s = projects.schema()
    plan = propagate_pk_renames(plan_for(s, {("dept", "dno"): "department_number"}), s)
    view = ExecutableSchema(projects.db, build_view_layer(s, plan.mapping), s)
    base = ExecutableSchema(projects.db)
    q_base = "SELECT e.ename, p.pname FROM employee e JOIN project p ON e.dno = p.dno"
    q_view = ("SELECT e.ename, p.pname FROM employee e JOIN project p "
              "ON e.department_number = p.department_number")
    assert results_equal(execute(base, q_base), execute(view, q_view))
    assert len(execute(view, q_view).rows) == 5
