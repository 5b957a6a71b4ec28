import json

import httpx
import numpy as np
import pytest

from graphground.providers import (CachedEmbedder, FailingProvider, HTTPProvider, MockChat, MockEmbedder,
                                   MockScriptExhausted, ProviderConfig, ProviderError, TokenBucket, load_providers,
                                   mock_embed)


def test_mock_embed_fixed_values():
    assert float(mock_embed("chair") @ mock_embed("chair")) == pytest.approx(1.0)
    assert float(mock_embed("couch") @ mock_embed("sofa")) == pytest.approx(0.9, abs=1e-6)
    # measured once for the 256-dim hash vectors and kept as a regression bound
    assert abs(float(mock_embed("chair") @ mock_embed("piano"))) < 0.3
    assert mock_embed("Chair ") @ mock_embed("chair") == pytest.approx(1.0)


def test_mock_embedder_batch():
    a, b = MockEmbedder().embed_text(["chair", "chair"])
    assert np.array_equal(a, b) and a.shape == (256,)
    with pytest.raises(ValueError):
        MockEmbedder().embed_text([])


def test_cached_embedder_calls_inner_once():
    inner = MockEmbedder()
    c = CachedEmbedder(inner)
    c.embed_text(["chair", "table"])
    c.embed_text(["table", "chair"])
    assert inner.calls == 1
    assert np.array_equal(c.embed("chair"), mock_embed("chair"))


def test_mock_chat_script_and_rules():
    chat = MockChat(script=["a", "b"])
    assert [chat.chat([{"role": "user", "text": "x"}]) for _ in range(2)] == ["a", "b"]
    with pytest.raises(MockScriptExhausted):
        chat.chat([{"role": "user", "text": "x"}])
    ruled = MockChat(rules=[("Image id: 1\n", "r1")], default="NONE")
    assert ruled.chat([{"role": "user", "text": "Image id: 1\nhello"}]) == "r1"
    assert ruled.chat([{"role": "user", "text": "Image id: 11\nhello"}]) == "NONE"


def test_failing_provider():
    p = FailingProvider()
    with pytest.raises(ProviderError):
        p.chat([{"role": "user", "text": "x"}])
    assert p.calls == 1


class FakeClock:
    def __init__(self):
        self.t = 0.0
        self.slept = []

    def __call__(self):
        return self.t

    def sleep(self, s):
        self.slept.append(s)
        self.t += s


def test_token_bucket_spacing():
    clk = FakeClock()
    tb = TokenBucket(rpm=60, burst=1, clock=clk, sleep=clk.sleep)
    waits = [tb.acquire() for _ in range(3)]
    assert waits[0] == 0.0 and waits[1] == pytest.approx(1.0) and waits[2] == pytest.approx(1.0)


def _provider(handler, retries=2, transcript=None, monkeypatch=None):
    clk = FakeClock()
    cfg = ProviderConfig(endpoint="http://test/v1", model="m", max_retries=retries, rpm=6000)
    return HTTPProvider(cfg, transport=httpx.MockTransport(handler), transcript=transcript,
                        limiter=TokenBucket(6000, burst=100, clock=clk, sleep=clk.sleep))


def test_server_error_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(500, text="boom")

    with pytest.raises(ProviderError) as info:
        _provider(handler).chat([{"role": "user", "text": "hi"}])
    assert len(calls) == 3 and info.value.status == 500


def test_client_error_does_not_retry():
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(401, text="nope")

    with pytest.raises(ProviderError):
        _provider(handler).embed_text(["x"])
    assert len(calls) == 1


def test_retry_then_success_and_wire_shape(monkeypatch):
    monkeypatch.setenv("GRAPHGROUND_API_KEY", "secret-key")
    seen = []

    def handler(request):
        seen.append(request)
        if len(seen) == 1:
            return httpx.Response(503)
        body = json.loads(request.content)
        assert request.url.path == "/v1/chat/completions"
        assert body["model"] == "m"
        content = body["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "look"}
        assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
        return httpx.Response(200, json={"choices": [{"message": {"content": "2"}}]})

    transcript = []
    p = _provider(handler, transcript=transcript)
    img = np.zeros((4, 4, 3), np.uint8)
    assert p.chat([{"role": "user", "text": "look", "image": img}]) == "2"
    assert seen[-1].headers["authorization"] == "Bearer secret-key"
    assert all(t["headers"].get("Authorization") == "***" for t in transcript)
    assert "secret-key" not in json.dumps(transcript)


def test_embeddings_normalized_and_ordered():
    def handler(request):
        body = json.loads(request.content)
        assert body["input"] == ["a", "b"]
        return httpx.Response(200, json={"data": [{"index": 1, "embedding": [0, 2]}, {"index": 0, "embedding": [3, 4]}]})

    a, b = _provider(handler).embed_text(["a", "b"])
    assert np.allclose(a, [0.6, 0.8]) and np.allclose(b, [0, 1])


def test_transport_error_retried():
    n = []

    def handler(request):
        n.append(1)
        raise httpx.ConnectError("down")

    with pytest.raises(ProviderError, match="ConnectError"):
        _provider(handler, retries=1).chat([{"role": "user", "text": "x"}])
    assert len(n) == 2


def test_load_providers(tmp_path):
    assert load_providers(None).chat is None
    (tmp_path / "rules.json").write_text(json.dumps({"rules": [["hi", "there"]], "default": "NONE"}))
    (tmp_path / "p.json").write_text(json.dumps({"embed": "mock", "chat": {"mock": "rules.json"}}))
    p = load_providers(str(tmp_path / "p.json"))
    assert p.chat.chat([{"role": "user", "text": "hi"}]) == "there"
    (tmp_path / "h.json").write_text(json.dumps({"embed": {"endpoint": "http://x/v1", "model": "e"}, "chat": None}))
    assert isinstance(load_providers(str(tmp_path / "h.json")).embedder.inner, HTTPProvider)
