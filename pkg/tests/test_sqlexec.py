from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schemarefine.schema import RefinementMapping
from schemarefine.sqlexec import (ExecTimeout, ExecutableSchema, MissingObjectError, ReadOnlyViolation, ResultSet,
                                  RewriteError, SqlSyntaxError, check_read_only, execute, has_top_level_order_by,
                                  results_equal, rewrite_identifiers)
from schemarefine.synthesis import build_view_layer

from test_sqltokens import CORPUS


def rs(rows, ordered=False, truncated=False):
    rows = tuple(tuple(r) for r in rows)
    return ResultSet(len(rows[0]) if rows else 0, rows, ordered, truncated)


def test_count_on_fixture(tiny):
    res = execute(ExecutableSchema(tiny.db), "SELECT COUNT(*) FROM employee")
    assert res.rows == ((4,),) and res.ncols == 1


def test_empty_result(tiny):
    res = execute(ExecutableSchema(tiny.db), "SELECT 1 WHERE 0")
    assert res.rows == () and not res.truncated


@pytest.mark.parametrize("sql", ["DROP TABLE employee", "DELETE FROM employee",
                                 "SELECT 1; DROP TABLE employee", "PRAGMA writable_schema = 1",
                                 "WITH x AS (SELECT 1) DELETE FROM employee"])
def test_mutations_rejected_before_execution(tiny, sql):
    with pytest.raises(ReadOnlyViolation):
        execute(ExecutableSchema(tiny.db), sql)
    assert execute(ExecutableSchema(tiny.db), "SELECT COUNT(*) FROM employee").rows == ((4,),)


def test_read_only_allows_select_forms():
    for sql in ["SELECT 1", "  with a as (select 1) select * from a", "VALUES (1)", "(SELECT 1)", "SELECT 1;"]:
        check_read_only(sql)


def test_error_kinds(tiny):
    view = ExecutableSchema(tiny.db)
    with pytest.raises(SqlSyntaxError):
        execute(view, "SELECT FROM WHERE")
    with pytest.raises(MissingObjectError):
        execute(view, "SELECT ghost FROM employee")
    with pytest.raises(MissingObjectError):
        execute(view, "SELECT * FROM ghost")


def test_timeout(tiny):
    slow = ("WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) "
            "SELECT count(*) FROM c")
    with pytest.raises(ExecTimeout):
        execute(ExecutableSchema(tiny.db), slow, timeout=0.2)


def test_row_cap_marks_truncation(tiny):
    res = execute(ExecutableSchema(tiny.db), "SELECT * FROM employee", row_cap=2)
    assert res.truncated and len(res.rows) == 2
    assert not results_equal(res, res)


def test_order_by_detection():
    assert has_top_level_order_by("SELECT a FROM t ORDER BY a")
    assert not has_top_level_order_by("SELECT a FROM (SELECT a FROM t ORDER BY a)")
    assert not has_top_level_order_by("SELECT 'ORDER BY' FROM t")


def test_results_equal_examples():
    a = rs([(1, "a"), (2, "b")])
    b = rs([(2, "b"), (1, "a")])
    assert results_equal(a, b)
    assert not results_equal(rs(a.rows, ordered=True), b)
    assert results_equal(rs([(0.30000000001,)]), rs([(0.3,)]))
    assert not results_equal(rs([(None,)]), rs([(0,)]))
    assert results_equal(rs([(None,)]), rs([(None,)]))
    assert not results_equal(rs([(1,), (1,)]), rs([(1,)]))  # multiset, not set
    assert results_equal(rs([(2,)]), rs([(2.0,)]))


cells = st.one_of(st.none(), st.integers(-3, 3), st.sampled_from([0.1, 0.1 + 1e-9, 0.2, 1.0]), st.sampled_from("ab"))
results = st.lists(st.tuples(cells, cells), max_size=4).map(rs)


@settings(max_examples=300)
@given(results, results, results)
def test_results_equal_is_an_equivalence(a, b, c):
    assert results_equal(a, a)
    assert results_equal(a, b) == results_equal(b, a)
    if results_equal(a, b) and results_equal(b, c):
        assert results_equal(a, c)


def test_rewrite_examples(tiny):
    s = tiny.schema()
    r = RefinementMapping({s.column("employee", "nm"): "employee_name"})
    assert rewrite_identifiers("SELECT nm FROM employee", r, s) == "SELECT employee_name FROM employee"
    assert rewrite_identifiers("SELECT 'nm' FROM employee", r, s) == "SELECT 'nm' FROM employee"
    assert rewrite_identifiers('SELECT "nm" FROM employee', r, s) == 'SELECT "employee_name" FROM employee'
    for sql in CORPUS:
        assert rewrite_identifiers(sql, RefinementMapping(), s) == sql


def test_rewrite_reserved_word_is_quoted(tiny):
    s = tiny.schema()
    r = RefinementMapping({s.column("employee", "nm"): "order"})
    assert rewrite_identifiers("SELECT e.nm FROM employee e", r, s) == 'SELECT e."order" FROM employee e'


def test_rewrite_ambiguous_reference_errors(tiny):
    s = tiny.schema()
    r = RefinementMapping({s.column("department", "dept_id"): "department_id"})
    with pytest.raises(RewriteError) as err:
        rewrite_identifiers("SELECT dept_id FROM employee, department", r, s)
    assert err.value.offset == 7


def test_rewrite_round_trip(tiny):
    s = tiny.schema()
    r = RefinementMapping({s.column("employee", "nm"): "employee_name", s.column("employee", "sal"): "salary",
                           s.column("department", "dept_nm"): "department_name"})
    renamed = r.apply(s)
    inv = r.inverse(s)
    for sql in CORPUS:
        assert rewrite_identifiers(rewrite_identifiers(sql, r, s), inv, renamed) == sql


def test_view_layer_resolves_refined_names(tiny):
    s = tiny.schema()
    layer = build_view_layer(s, RefinementMapping({s.column("employee", "nm"): "employee_name"}))
    view = ExecutableSchema(tiny.db, layer, s)
    res = execute(view, "SELECT employee_name FROM employee ORDER BY emp_id")
    assert [r[0] for r in res.rows] == ["Alice", "Bob", "Carol", "Dave"]
    assert [c.name for c in view.schema.columns_of("employee")] == ["emp_id", "employee_name", "sal", "dept_id"]
    with pytest.raises(MissingObjectError):
        execute(view, "SELECT nm FROM employee")
    with pytest.raises(ReadOnlyViolation):
        execute(view, "DELETE FROM employee")
