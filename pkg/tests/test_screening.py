from __future__ import annotations

import httpx
import pytest

from schemarefine.backends import ChatClient, EndpointConfig
from schemarefine.schema import ColumnRef, SchemaModel
from schemarefine.screening import (LLMScreener, RuleScreener, ScreeningContext, parse_yes_no, screen,
                                    screening_context, structural_exclusions, verdicts_to_json)
from schemarefine.sqlexec import ExecutableSchema


def ctx(name: str) -> ScreeningContext:
    return ScreeningContext("", "t", name, "TEXT", (), ())


def test_fk_column_is_excluded_pk_is_not(tiny):
    s = tiny.schema()
    ex = structural_exclusions(s)
    assert {c.qualified: why for c, why in ex.items()} == {"employee.dept_id": "foreign key"}


def test_unlinked_same_name_same_type_is_an_implicit_join_key():
    a, b, c = ColumnRef("t1", "code", "TEXT"), ColumnRef("t2", "code", "TEXT"), ColumnRef("t3", "code", "INTEGER")
    ex = structural_exclusions(SchemaModel([a, b, c]))
    assert ex == {a: "implicit join key", b: "implicit join key"}


@pytest.mark.parametrize("name,flagged", [
    ("nm", True), ("sal", True), ("dept_nm", True), ("x1", True), ("value", True), ("cust_nbr", True),
    ("employee_name", False), ("salary", False), ("emp_id", False), ("dept_id", False), ("description", False),
])
def test_rule_screener(name, flagged):
    assert RuleScreener().assess(ctx(name))[0] is flagged


def test_screen_tiny(tiny):
    s = tiny.schema()
    verdicts = screen(s, RuleScreener(), ExecutableSchema(tiny.db).sample_rows)
    assert [v.column.qualified for v in verdicts] == [
        "department.dept_id", "department.dept_nm", "employee.emp_id", "employee.nm", "employee.sal"]
    assert {v.column.qualified for v in verdicts if v.flagged} == {
        "department.dept_nm", "employee.nm", "employee.sal"}
    js = verdicts_to_json(verdicts, structural_exclusions(s))
    assert js["excluded"] == [{"table": "employee", "column": "dept_id", "reason": "foreign key"}]


def test_clean_names_are_not_flagged(tiny_clean):
    s = tiny_clean.schema()
    verdicts = screen(s, RuleScreener(), {})
    assert not [v for v in verdicts if v.flagged]


class Exploding:
    screener_id = "boom"

    def assess(self, ctx):
        raise RuntimeError("no route to host")


def test_screener_failure_flags(tiny):
    verdicts = screen(tiny.schema(), Exploding(), {}, parallelism=2)
    assert len(verdicts) == 5 and all(v.flagged for v in verdicts)
    assert "screener failure" in verdicts[0].reason


@pytest.mark.parametrize("text,flag", [
    ("No. The name is clear.", False), ("yes - abbreviation", True), ('"Yes"', True),
    ("**no**", False), ("maybe", True), ("", True),
])
def test_parse_yes_no(text, flag):
    assert parse_yes_no(text)[0] is flag


def test_context_carries_neighbors_and_five_rows(tiny):
    s = tiny.schema()
    c = screening_context(s, s.column("employee", "nm"), ExecutableSchema(tiny.db).sample_rows)
    assert c.neighbors == ("emp_id", "sal", "dept_id")
    assert len(c.sample_rows) == 4 and c.sample_rows[0] == (1, "Alice", 50000.0, 1)


def test_llm_screener_prompt_and_verdict(tiny):
    prompts = []

    def handler(request):
        prompts.append(request.read().decode())
        answer = "no, clear" if "employee_name" in prompts[-1] else "yes, abbreviation"
        return httpx.Response(200, json={"choices": [{"message": {"content": answer}}]})

    client = ChatClient(EndpointConfig("http://x/v1", "m", api_key_env=None), transport=httpx.MockTransport(handler))
    s = tiny.schema()
    verdicts = screen(s, LLMScreener(client), ExecutableSchema(tiny.db).sample_rows)
    assert all(v.flagged for v in verdicts)
    assert "Column: nm (TEXT)" in "".join(prompts)
    assert "'Alice'" in "".join(prompts)
