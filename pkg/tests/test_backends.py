from __future__ import annotations

import json

import httpx
import pytest

from schemarefine.backends import (CachedBackend, ChatClient, EndpointConfig, LLMBackend, MockBackend,
                                   ResponseCache, Text2SqlRequest, build_request, extract_sql)
from schemarefine.schema import RefinementMapping
from schemarefine.sqlexec import ExecutableSchema
from schemarefine.synthesis import build_view_layer


def mock_sql(view: ExecutableSchema, question: str) -> str:
    return MockBackend().infer(build_request(question, view)).predicted_sql


def test_mock_prefers_readable_names(tiny, tiny_clean):
    q = "what is the employee name"
    assert mock_sql(ExecutableSchema(tiny_clean.db), q) == "SELECT employee_name FROM employee"
    assert mock_sql(ExecutableSchema(tiny.db), q) != "SELECT nm FROM employee"


def test_mock_hand_traces_on_degraded_fixture(tiny):
    view = ExecutableSchema(tiny.db)
    # the sampled value 'Alice' is the only signal, and it lives in employee.nm
    assert mock_sql(view, "how many employees are named Alice") == "SELECT COUNT(*) FROM employee WHERE nm = 'Alice'"
    # no column token matches: every table scores 0 and the earliest one wins
    assert mock_sql(view, "how many employees are there") == "SELECT COUNT(*) FROM department"
    assert mock_sql(view, "what is the salary of each employee") == "SELECT * FROM department"
    # department: dept_id 0.5 + value hit 1.0 beats employee: emp_id 0.5 + dept_id 0.5
    assert mock_sql(view, "what is the department id of the department named Sales") == \
        "SELECT dept_id FROM department WHERE dept_nm = 'Sales'"


def test_mock_empty_question_falls_back(tiny):
    assert mock_sql(ExecutableSchema(tiny.db), "") == "SELECT * FROM department"
    assert mock_sql(ExecutableSchema(tiny.db), "?!") == "SELECT * FROM department"


def test_mock_sees_only_refined_names(tiny):
    s = tiny.schema()
    layer = build_view_layer(s, RefinementMapping({s.column("employee", "sal"): "salary"}))
    view = ExecutableSchema(tiny.db, layer, s)
    req = build_request("what is the salary of each employee", view)
    text = req.serialize_schema()
    assert "salary" in text and " sal " not in text
    assert MockBackend().infer(req).predicted_sql == "SELECT salary FROM employee"


def test_mock_is_deterministic(tiny):
    view = ExecutableSchema(tiny.db)
    req = build_request("what are the name and salary of each employee", view)
    assert len({MockBackend().infer(req).predicted_sql for _ in range(5)}) == 1


def test_serialization_lists_fks_and_samples(tiny):
    text = build_request("q", ExecutableSchema(tiny.db)).serialize_schema()
    assert "FOREIGN KEY (dept_id) REFERENCES department(dept_id)" in text
    assert "(1, 'Alice', 50000.0, 1)" in text


@pytest.mark.parametrize("text,expected", [
    ("```sql\nSELECT 1\n```", "SELECT 1"),
    ("Here you go:\n```sql\nSELECT a\nFROM t\n```\nthanks", "SELECT a\nFROM t"),
    ("The answer is\nSELECT a\nFROM t;\n\nDone.", "SELECT a FROM t"),
    ("WITH x AS (SELECT 1) SELECT * FROM x", "WITH x AS (SELECT 1) SELECT * FROM x"),
    ("I cannot answer that.", None),
])
def test_extract_sql(text, expected):
    assert extract_sql(text) == expected


def chat_reply(content: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def make_client(handler, **cfg) -> ChatClient:
    config = EndpointConfig("http://llm.test/v1", "test-model", api_key_env="SR_TEST_KEY", **cfg)
    return ChatClient(config, transport=httpx.MockTransport(handler))


def test_llm_backend_happy_path(tiny, monkeypatch):
    monkeypatch.setenv("SR_TEST_KEY", "sekret")
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(200, json=chat_reply("Sure.\n```sql\nSELECT nm FROM employee\n```"))

    backend = LLMBackend("gpt", make_client(handler))
    resp = backend.infer(build_request("names?", ExecutableSchema(tiny.db)))
    assert resp.ok and resp.predicted_sql == "SELECT nm FROM employee"
    body = json.loads(seen[0].content)
    assert body["model"] == "test-model" and body["temperature"] == 0
    assert "CREATE TABLE employee" in body["messages"][0]["content"]
    assert seen[0].headers["authorization"] == "Bearer sekret"
    assert seen[0].url.path == "/v1/chat/completions"


def test_llm_timeout_is_a_failure_marker_with_bounded_retries(tiny):
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ReadTimeout("slow", request=request)

    backend = LLMBackend("gpt", make_client(handler, max_retries=2))
    resp = backend.infer(build_request("q", ExecutableSchema(tiny.db)))
    assert not resp.ok and resp.error.startswith("transport")
    assert len(calls) == 3


def test_llm_unparseable_reply(tiny):
    backend = LLMBackend("gpt", make_client(lambda r: httpx.Response(200, json=chat_reply("no idea"))))
    resp = backend.infer(build_request("q", ExecutableSchema(tiny.db)))
    assert not resp.ok and resp.error == "no SQL in response"
    backend = LLMBackend("gpt", make_client(lambda r: httpx.Response(500, text="boom"), max_retries=0))
    assert not backend.infer(build_request("q", ExecutableSchema(tiny.db))).ok


def test_cached_backend_replays(tiny, tmp_path):
    cache = ResponseCache(tmp_path / "c.sqlite")
    inner = MockBackend()
    b = CachedBackend(inner, cache)
    req = build_request("what is the name of each department", ExecutableSchema(tiny.db))
    first = b.infer(req)
    second = b.infer(req)
    assert first.predicted_sql == second.predicted_sql
    assert (b.calls, b.hits) == (1, 1)
    cache.close()
    again = CachedBackend(inner, ResponseCache(tmp_path / "c.sqlite"))
    assert again.infer(req).predicted_sql == first.predicted_sql and again.calls == 0


def test_transport_failures_are_not_cached(tiny):
    cache = ResponseCache()

    def handler(request):
        raise httpx.ConnectError("down", request=request)

    b = CachedBackend(LLMBackend("gpt", make_client(handler, max_retries=0)), cache)
    req = build_request("q", ExecutableSchema(tiny.db))
    b.infer(req)
    b.infer(req)
    assert b.calls == 2 and b.hits == 0


def test_cache_key_depends_on_schema_and_backend(tiny):
    s = tiny.schema()
    a = Text2SqlRequest("q", s)
    renamed = RefinementMapping({s.column("employee", "nm"): "employee_name"}).apply(s)
    assert a.cache_key("m") != Text2SqlRequest("q", renamed).cache_key("m")
    assert a.cache_key("m") != a.cache_key("n")
    assert a.cache_key("m") == Text2SqlRequest("q", s).cache_key("m")
