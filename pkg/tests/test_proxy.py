import httpx
import pytest
from fastapi.testclient import TestClient

from semcache import synthetic
from semcache.cache import LookupConfig, SemanticCache
from semcache.embedding import StubProvider
from semcache.errors import UpstreamBadStatus, UpstreamUnreachable
from semcache.proxy import ProxyConfig, ProxyService, UpstreamClient, create_app, parse_messages

Q1, Q2, Q3, Q4 = (synthetic.BACKGROUND_Q1, synthetic.BACKGROUND_Q2,
                  synthetic.BACKGROUND_Q3, synthetic.BACKGROUND_Q4)


def _user(*texts):
    msgs = []
    for t in texts:
        msgs.append({"role": "user", "content": t})
        msgs.append({"role": "assistant", "content": "..."})
    return {"model": "m", "messages": msgs[:-1]}


@pytest.fixture
def service():
    return ProxyService(SemanticCache(StubProvider()), UpstreamClient("mock"))


@pytest.fixture
def client(service):
    with TestClient(create_app(service)) as c:
        yield c


def _text(resp):
    return resp.json()["choices"][0]["message"]["content"]


def test_miss_then_hit_with_one_upstream_call(client, service):
    body = _user("How do I draw a line in python?")
    first = client.post("/v1/chat/completions", json=body)
    second = client.post("/v1/chat/completions", json=body)
    assert first.status_code == second.status_code == 200
    assert first.headers["x-cache"] == "MISS" and second.headers["x-cache"] == "HIT"
    assert _text(first).encode() == _text(second).encode()
    assert service.upstream.calls == 1
    assert second.headers["x-cache-entry-id"] == first.headers["x-cache-entry-id"]


def test_background_conversations(client, service):
    assert client.post("/v1/chat/completions", json=_user(Q1)).headers["x-cache"] == "MISS"
    assert client.post("/v1/chat/completions", json=_user(Q1, Q2)).headers["x-cache"] == "MISS"
    assert client.post("/v1/chat/completions", json=_user(Q3)).headers["x-cache"] == "MISS"
    q4 = client.post("/v1/chat/completions", json=_user(Q3, Q4))
    assert q4.headers["x-cache"] == "MISS"
    assert "Change the color to red" in _text(q4)
    assert client.post("/v1/chat/completions", json=_user(Q1, Q2)).headers["x-cache"] == "HIT"
    assert service.upstream.calls == 4


@pytest.mark.parametrize("body", [{"messages": []}, {}, {"messages": [{"role": "user"}]},
                                  {"messages": [{"role": "assistant", "content": "hi"}]}])
def test_bad_requests(client, body):
    assert client.post("/v1/chat/completions", json=body).status_code == 400


def test_invalid_json(client):
    r = client.post("/v1/chat/completions", content=b"{nope", headers={"content-type": "application/json"})
    assert r.status_code == 400


def test_metrics_and_health(client):
    body = _user("what is a monad")
    seen = []
    for _ in range(3):
        client.post("/v1/chat/completions", json=body)
        m = client.get("/metrics").json()
        assert m["hits"] + m["misses"] == m["lookups"]
        seen.append(m)
    assert seen[-1] == {"lookups": 3, "hits": 2, "misses": 1, "inserts": 1, "upstream_errors": 0}
    for a, b in zip(seen, seen[1:]):
        assert all(b[k] >= a[k] for k in a)
    assert client.get("/healthz").json() == {"status": "ok", "entries": 1}


def test_session_header_supplies_history(client):
    h = {"X-Session-Id": "s1"}
    client.post("/v1/chat/completions", json=_user(Q1), headers=h)
    client.post("/v1/chat/completions", json=_user(Q2), headers=h)
    # same follow-up in a session with a different root
    h2 = {"X-Session-Id": "s2"}
    client.post("/v1/chat/completions", json=_user(Q3), headers=h2)
    assert client.post("/v1/chat/completions", json=_user(Q4), headers=h2).headers["x-cache"] == "MISS"
    # replaying the first conversation statelessly hits the follow-up
    assert client.post("/v1/chat/completions", json=_user(Q1, Q2)).headers["x-cache"] == "HIT"


def test_feedback_endpoint(client, service):
    body = _user("how to boil an egg")
    client.post("/v1/chat/completions", json=body)
    hit = client.post("/v1/chat/completions", json=body)
    eid = int(hit.headers["x-cache-entry-id"])
    r = client.post("/feedback", json={"entry_id": eid, "judgment": "rejected"})
    assert r.status_code == 200 and r.json()["feedback_count"] == 1
    assert service.cache.feedback_log[0].duplicate is False
    assert client.post("/feedback", json={"entry_id": 999, "judgment": "rejected"}).status_code == 404
    assert client.post("/feedback", json={"entry_id": eid, "judgment": "maybe"}).status_code == 400
    assert client.post("/feedback", json=[1]).status_code == 400


def test_mock_upstream_contract():
    up = UpstreamClient("mock", latency_ms=50)
    msgs = [{"role": "user", "content": "hi"}]
    a, b = up.query(msgs), up.query(msgs)
    assert a.text == b.text and a.served_from == "upstream"
    assert a.latency_ms >= 50 and up.calls == 2


def test_dead_upstream_is_unreachable():
    up = UpstreamClient("http://127.0.0.1:9", timeout=2)
    with pytest.raises(UpstreamUnreachable):
        up.query([{"role": "user", "content": "hi"}])


def _transport(status, payload):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        return httpx.Response(status, json=payload)

    return httpx.Client(transport=httpx.MockTransport(handler)), seen


def test_url_upstream_round_trip():
    http, seen = _transport(200, {"choices": [{"message": {"content": "real answer"}}], "usage": {"total_tokens": 3}})
    up = UpstreamClient("https://llm.example/v1", http=http)
    res = up.query([{"role": "user", "content": "hi"}])
    assert res.text == "real answer" and res.usage == {"total_tokens": 3}
    assert seen["url"] == "https://llm.example/v1/chat/completions"


def test_upstream_error_statuses():
    http, _ = _transport(503, {"error": "down"})
    with pytest.raises(UpstreamBadStatus):
        UpstreamClient("https://llm.example", http=http).query([{"role": "user", "content": "x"}])


def test_upstream_failure_maps_to_502():
    http, _ = _transport(500, {"error": "boom"})
    svc = ProxyService(SemanticCache(StubProvider()), UpstreamClient("https://llm.example", http=http))
    status, body, headers = svc.handle_chat_completion(_user("anything"))
    assert status == 502 and headers["X-Cache"] == "MISS"
    assert svc.metrics.snapshot()["upstream_errors"] == 1
    assert len(svc.cache) == 0


def test_config_validation():
    assert ProxyConfig().host_port() == ("127.0.0.1", 8080)
    with pytest.raises(ValueError):
        ProxyConfig(listen_addr="nowhere")
    with pytest.raises(ValueError):
        ProxyConfig(session_ttl_s=0)


def test_config_lookup_overrides_cache():
    cache = SemanticCache(StubProvider())
    ProxyService(cache, UpstreamClient(), ProxyConfig(lookup=LookupConfig(tau=0.95)))
    assert cache.lookup_config.tau == 0.95


def test_cache_saved_on_shutdown(tmp_path):
    path = tmp_path / "proxy.mcch"
    svc = ProxyService(SemanticCache(StubProvider()), UpstreamClient(), ProxyConfig(cache_path=str(path)))
    with TestClient(create_app(svc)) as c:
        c.post("/v1/chat/completions", json=_user("persist me"))
    loaded = SemanticCache.load(path, StubProvider())
    assert [e.query_text for e in loaded.entries()] == ["persist me"]


def test_parse_messages_history_is_user_turns_only():
    _, query, history = parse_messages(_user("a", "b", "c"))
    assert query == "c" and history == ["a", "b"]
