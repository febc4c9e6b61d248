import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from recsim_profiles.errors import BackendError, CacheMissError, ConfigError, MalformedOutputError
from recsim_profiles.llm import (
    Gateway,
    LiveBackend,
    PromptRequest,
    ReplayBackend,
    ResponseSchema,
    ScriptedBackend,
    cache_key,
)
from recsim_profiles.llm.backends import load_scripted_table
from recsim_profiles.llm.parsing import SchemaViolation, parse_response, repair_ranking

CANDS = [f"c{i}" for i in range(1, 11)]


def req(**kw):
    base = dict(model_id="m", system_message="sys", user_message="hello", tag="stage1-extract")
    base.update(kw)
    return PromptRequest(**base)


def chat(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}})


# ------------------------------------------------------------- cache key

def test_cache_key_identity_temperature_and_tag():
    assert cache_key(req()) == cache_key(req())
    assert cache_key(req(temperature=0.1)) != cache_key(req(temperature=0.2))
    assert cache_key(req(tag="a")) == cache_key(req(tag="b"))
    assert cache_key(req(request_seed=1)) != cache_key(req(request_seed=2))


@given(st.text(min_size=1), st.text(min_size=1))
def test_cache_key_separates_system_and_user(a, b):
    if a != b:
        assert cache_key(req(system_message=a, user_message=b)) != cache_key(req(system_message=b, user_message=a))


def test_request_validation():
    with pytest.raises(ValueError):
        req(user_message="")
    with pytest.raises(ValueError):
        req(temperature=-1)


# -------------------------------------------------------------- scripted

def test_scripted_table_is_deterministic():
    r = req()
    backend = ScriptedBackend({("stage1-extract", cache_key(r)): "canned"})
    outs = {backend.complete(r).text for _ in range(3)}
    assert outs == {"canned"}


def test_scripted_tag_fallback_and_missing_key():
    backend = ScriptedBackend({("stage1-extract", None): "any"})
    assert backend.complete(req(user_message="other")).text == "any"
    with pytest.raises(ConfigError):
        backend.complete(req(tag="unknown"))


def test_load_scripted_table(tmp_path):
    p = tmp_path / "t.yaml"
    p.write_text("responses:\n  - tag: stage1-extract\n    response: '[\"x\"]'\n  - tag: t2\n    digest: abc\n    response: y\n")
    assert load_scripted_table(p) == {("stage1-extract", None): '["x"]', ("t2", "abc"): "y"}
    bad = tmp_path / "bad.yaml"
    bad.write_text("responses:\n  - tag: a\n")
    with pytest.raises(ConfigError):
        load_scripted_table(bad)


# ------------------------------------------------------------------ live

def test_live_retries_429_twice_then_succeeds():
    statuses = iter([429, 429, 200])
    sleeps = []

    def handler(request):
        s = next(statuses)
        return chat("ok") if s == 200 else httpx.Response(s)

    backend = LiveBackend("http://fake", transport=httpx.MockTransport(handler), sleep=sleeps.append)
    resp = backend.complete(req())
    assert resp.text == "ok" and resp.backend == "live"
    assert resp.latency_ms >= 0 and resp.prompt_tokens == 3
    assert backend.calls == 3
    assert sleeps == [1.0, 2.0]


def test_live_exhaustion_raises_backend_error():
    backend = LiveBackend("http://fake", transport=httpx.MockTransport(lambda r: httpx.Response(503)), sleep=lambda s: None)
    with pytest.raises(BackendError, match="exhausted"):
        backend.complete(req())
    assert backend.calls == 3


def test_live_client_error_is_not_retried():
    backend = LiveBackend("http://fake", transport=httpx.MockTransport(lambda r: httpx.Response(401)), sleep=lambda s: None)
    with pytest.raises(BackendError):
        backend.complete(req())
    assert backend.calls == 1


def test_live_sends_key_from_environment(monkeypatch):
    seen = []

    def handler(request):
        seen.append(request)
        return chat("ok")

    monkeypatch.setenv("MY_KEY", "secret")
    backend = LiveBackend("http://fake", api_key_env="MY_KEY", transport=httpx.MockTransport(handler))
    backend.complete(req(request_seed=9))
    assert seen[0].headers["authorization"] == "Bearer secret"
    body = json.loads(seen[0].content)
    assert body["seed"] == 9 and body["temperature"] == 0.1


# ---------------------------------------------------------------- replay

def test_replay_record_then_strict(tmp_path):
    path = tmp_path / "cache.jsonl"
    inner = ScriptedBackend({("stage1-extract", None): "answer"})
    rec = ReplayBackend(path, inner, "record")
    assert rec.complete(req()).text == "answer"
    assert rec.complete(req()).text == "answer"
    assert inner.calls == 1 and rec.hits == 1

    strict = ReplayBackend(path, None, "strict")
    assert strict.complete(req()).text == "answer"
    with pytest.raises(CacheMissError) as err:
        strict.complete(req(user_message="unseen"))
    assert err.value.digest == cache_key(req(user_message="unseen"))


def test_replay_mode_does_not_persist(tmp_path):
    path = tmp_path / "cache.jsonl"
    ReplayBackend(path, ScriptedBackend({("stage1-extract", None): "x"}), "replay").complete(req())
    assert not path.exists()


def test_replay_tolerates_torn_line(tmp_path):
    path = tmp_path / "cache.jsonl"
    ReplayBackend(path, ScriptedBackend({("stage1-extract", None): "x"}), "record").complete(req())
    with open(path, "a") as fh:
        fh.write('{"digest": "abc", "resp')
    assert len(ReplayBackend(path, None, "strict")) == 1


def test_replay_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ReplayBackend(tmp_path / "c", None, "record")
    with pytest.raises(ConfigError):
        ReplayBackend(tmp_path / "c", None, "bogus")


# --------------------------------------------------------------- gateway

def test_structured_selection_direct_parse():
    gw = Gateway(ScriptedBackend({("t", None): "c2, c7"}))
    out = gw.execute_structured(req(tag="t"), ResponseSchema("selection_set", {"candidates": CANDS, "max_size": 3}))
    assert set(out.value) == {"c2", "c7"} and not out.repaired and out.attempts == 1


def test_structured_ranking_repair_vs_retry():
    bad = json.dumps({"ranking": ["c3", "c1", "c3", "c2", "c4", "c5", "c6", "c7", "c8", "c10"]})
    good = json.dumps({"ranking": CANDS})
    schema = ResponseSchema("ranking", {"candidates": CANDS})
    out = Gateway(ScriptedBackend({("t", None): bad})).execute_structured(req(tag="t"), schema)
    assert out.repaired
    assert list(out.value) == ["c3", "c1", "c2", "c4", "c5", "c6", "c7", "c8", "c10", "c9"]

    answers = iter([bad, good])
    gw = Gateway(ScriptedBackend(responder=lambda r: next(answers)), repair=False)
    out = gw.execute_structured(req(tag="t"), schema)
    assert out.attempts == 2 and list(out.value) == CANDS


def test_structured_exhaustion_carries_raw_attempts():
    seen = []

    def responder(r):
        seen.append(r.user_message)
        return "no ids here"

    gw = Gateway(ScriptedBackend(responder=responder))
    with pytest.raises(MalformedOutputError) as err:
        gw.execute_structured(req(tag="t"), ResponseSchema("selection_set", {"candidates": CANDS}))
    assert err.value.attempts == ["no ids here"] * 3
    # retries carry a corrective suffix
    assert seen[0] == "hello" and seen[1].startswith("hello") and len(seen[1]) > len(seen[0])


def test_retry_budget_bounds_live_calls():
    calls = []

    def handler(request):
        calls.append(1)
        return chat("garbage") if len(calls) % 2 else httpx.Response(500)

    backend = LiveBackend("http://fake", transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(MalformedOutputError):
        Gateway(backend).execute_structured(req(tag="t"), ResponseSchema("selection_set", {"candidates": CANDS}))
    assert len(calls) <= 9


# --------------------------------------------------------------- parsing

def test_rating_clamped_with_flag():
    schema = ResponseSchema("rating_map", {"candidates": ["a", "b"], "scale": (1, 5)})
    out = parse_response('{"ratings": {"a": 6, "b": 3}}', schema)
    assert out.value == {"a": 5.0, "b": 3.0} and out.repaired
    with pytest.raises(SchemaViolation):
        parse_response('{"ratings": {"a": 6, "b": 3}}', schema, repair=False)


def test_selection_drops_non_candidates():
    schema = ResponseSchema("selection_set", {"candidates": CANDS, "max_size": 2})
    out = parse_response('{"selected": ["c1", "zz", "c1", "c4"]}', schema)
    assert out.value == ("c1", "c4") and out.repaired


def test_trait_list_bounds():
    schema = ResponseSchema("trait_list", {"min_items": 1, "max_items": 2})
    assert parse_response('{"traits": ["a", "A", "b"]}', schema).value == ["a", "b"]
    with pytest.raises(SchemaViolation):
        parse_response('{"traits": ["a", "b", "c"]}', schema)
    assert parse_response("- x\n- y\n", schema).value == ["x", "y"]


def test_decision_path_bounds():
    schema = ResponseSchema("decision_path", {"min_steps": 2, "max_steps": 6})
    out = parse_response('{"steps": [{"name": "Hard Filter", "description": "d"}, "Final pick"]}', schema)
    assert [s[0] for s in out.value] == ["hard-filter", "final-pick"]
    with pytest.raises(SchemaViolation):
        parse_response('{"steps": ["only"]}', schema)


@given(st.permutations(CANDS))
def test_ranking_repair_is_idempotent_on_valid_input(perm):
    fixed, notes = repair_ranking(list(perm), CANDS)
    assert fixed == list(perm) and notes == []


@given(st.lists(st.sampled_from(CANDS + ["x", "y"]), max_size=15))
def test_ranking_repair_always_yields_a_permutation(ids):
    fixed, _ = repair_ranking(ids, CANDS)
    assert sorted(fixed) == sorted(CANDS)
    again, notes = repair_ranking(fixed, CANDS)
    assert again == fixed and notes == []
