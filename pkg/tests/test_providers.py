import itertools
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventmem.errors import DimensionMismatch, ProviderRefusal, ScriptMiss, TransportError, ValidationError
from eventmem.providers import (
    ChatProvider, ChatRequest, Embedder, HashEmbedder, OpenAIChat, OpenAIEmbedder, ProviderPolicy,
    ProviderSettings, ScriptedChat, load_mock_providers, mock_hash_embed, text_digest,
)

from builders import chunky_script, multihop_groups, multihop_script, tokyo_script

NO_WAIT = dict(backoff_base_ms=0)


class TestScriptedChat:
    def test_ping_pong(self):
        assert ScriptedChat({"ping": "pong"}).complete(ChatRequest(user="ping")) == "pong"

    def test_unknown_key(self):
        with pytest.raises(ScriptMiss):
            ScriptedChat({"ping": "pong"}).complete(ChatRequest(user="pong"))

    def test_role_table_key_digest_and_default(self):
        chat = ScriptedChat({"qa": {"exact": "1", text_digest("hashed"): "2", "*": "3"}})
        assert chat.complete(ChatRequest(user="long prompt", role="qa", key="exact")) == "1"
        assert chat.complete(ChatRequest(user="long prompt", role="qa", key="hashed")) == "2"
        assert chat.complete(ChatRequest(user="long prompt", role="qa", key="other")) == "3"
        with pytest.raises(ScriptMiss):
            chat.complete(ChatRequest(user="x", role="judge", key="exact"))

    def test_sequence_repeats_last(self):
        chat = ScriptedChat({"r": {"k": ["a", "b"]}})
        req = ChatRequest(user="u", role="r", key="k")
        assert [chat.complete(req) for _ in range(3)] == ["a", "b", "b"]

    def test_when_contains(self):
        chat = ScriptedChat({"r": {"*": {"when_contains": "needle", "then": "yes", "else": "no"}}})
        assert chat.complete(ChatRequest(user="hay needle hay", role="r")) == "yes"
        assert chat.complete(ChatRequest(user="hay", role="r")) == "no"

    def test_select_containing(self):
        chat = ScriptedChat({"f": {"*": {"select_containing": ["cat"]}}})
        prompt = "Candidates:\n1. a dog\n2. a Cat\n3. a bird\n4. concatenate"
        assert json.loads(chat.complete(ChatRequest(user=prompt, role="f"))) == {"selected": [2, 4]}

    def test_scripted_errors(self):
        chat = ScriptedChat({"r": {"t": {"error": "transport"}, "x": {"error": "refusal"}}})
        with pytest.raises(TransportError):
            chat.complete(ChatRequest(user="u", role="r", key="t"))
        with pytest.raises(ProviderRefusal):
            chat.complete(ChatRequest(user="u", role="r", key="x"))

    def test_empty_user_rejected(self):
        with pytest.raises(ValidationError):
            ChatRequest(user="")

    def test_records_calls(self):
        chat = ScriptedChat({"ping": "pong"})
        chat.complete(ChatRequest(user="ping"))
        assert [c.user for c in chat.calls] == ["ping"]

    @pytest.mark.parametrize("script", [tokyo_script(), multihop_script(), chunky_script()])
    def test_fixture_scripts_are_json(self, script):
        assert json.loads(json.dumps(script)) == script


def _counting_transport(status=None, exc=None, payload=None):
    hits = []

    def handler(request):
        hits.append(json.loads(request.content))
        if exc is not None:
            raise exc
        if status is not None:
            return httpx.Response(status, text="nope")
        return httpx.Response(200, json=payload(hits[-1]))

    return hits, httpx.MockTransport(handler)


class TestHttpClients:
    def test_unreachable_endpoint_three_attempts(self):
        hits, transport = _counting_transport(exc=httpx.ConnectError("refused"))
        chat = OpenAIChat("m", "http://unreachable.invalid", policy=ProviderPolicy(retry_count=2, **NO_WAIT),
                          transport=transport)
        with pytest.raises(TransportError) as info:
            chat.complete(ChatRequest(user="hi"))
        assert len(hits) == 3
        assert info.value.attempts == 3

    def test_server_error_retried(self):
        hits, transport = _counting_transport(status=503)
        chat = OpenAIChat("m", policy=ProviderPolicy(retry_count=1, **NO_WAIT), transport=transport)
        with pytest.raises(TransportError):
            chat.complete(ChatRequest(user="hi"))
        assert len(hits) == 2

    def test_client_error_not_retried(self):
        hits, transport = _counting_transport(status=400)
        chat = OpenAIChat("m", policy=ProviderPolicy(retry_count=5, **NO_WAIT), transport=transport)
        with pytest.raises(ProviderRefusal):
            chat.complete(ChatRequest(user="hi"))
        assert len(hits) == 1

    def test_chat_request_body(self):
        hits, transport = _counting_transport(
            payload=lambda body: {"choices": [{"message": {"content": "ok"}}]})
        chat = OpenAIChat("gpt-x", transport=transport, policy=ProviderPolicy(**NO_WAIT))
        assert chat.complete(ChatRequest(user="hi", system="sys", max_output_tokens=7)) == "ok"
        body = hits[0]
        assert body["model"] == "gpt-x" and body["temperature"] == 0.0 and body["max_tokens"] == 7
        assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "hi"}]

    def test_embedder_order_and_dimension(self):
        def payload(body):
            rows = [{"index": i, "embedding": [float(i + 1), 0.0, 1.0]} for i in range(len(body["input"]))]
            return {"data": rows[::-1]}

        hits, transport = _counting_transport(payload=payload)
        emb = OpenAIEmbedder("e", 3, transport=transport, policy=ProviderPolicy(**NO_WAIT))
        out = emb.embed_batch(["a", "b", "a"])
        assert [v[0] for v in out] == [1.0, 2.0, 1.0]
        assert hits[0]["input"] == ["a", "b"] and hits[0]["dimensions"] == 3

    def test_embedder_wrong_dimension(self):
        hits, transport = _counting_transport(payload=lambda body: {"data": [{"index": 0, "embedding": [1.0]}]})
        emb = OpenAIEmbedder("e", 3, transport=transport, policy=ProviderPolicy(**NO_WAIT))
        with pytest.raises(DimensionMismatch):
            emb.embed("a")


class TestEmbedder:
    def test_same_text_bitwise_identical(self):
        emb = HashEmbedder(16, seed=1)
        a, b = emb.embed("tokyo"), HashEmbedder(16, seed=1).embed("tokyo")
        assert a.tobytes() == b.tobytes()

    def test_self_similarity(self):
        v = HashEmbedder(32).embed("anything")
        assert abs(float(v @ v) - 1.0) <= 1e-6

    def test_batch_order(self):
        emb = HashEmbedder(8)
        out = emb.embed_batch(["x", "y", "z"])
        assert len(out) == 3
        for t, v in zip(["x", "y", "z"], out):
            np.testing.assert_array_equal(v, mock_hash_embed(t, 8, 0))

    def test_rejects_empty(self):
        emb = HashEmbedder(8)
        with pytest.raises(ValidationError):
            emb.embed_batch([])
        with pytest.raises(ValidationError):
            emb.embed_batch(["ok", ""])

    @settings(max_examples=50)
    @given(st.text(min_size=1, max_size=40))
    def test_cache_transparency(self, text):
        emb = HashEmbedder(8)
        a, b = emb.embed_batch([text, text])
        np.testing.assert_array_equal(a, b)
        assert emb.backend_calls == 1
        emb.embed(text)
        assert emb.backend_calls == 1

    def test_wrong_dimension_from_backend(self):
        class Bad(Embedder):
            def _embed(self, texts):
                return [np.ones(self.dim + 1) for _ in texts]

        with pytest.raises(DimensionMismatch):
            Bad(4).embed("x")

    @settings(max_examples=30)
    @given(st.integers(2, 64), st.integers(0, 2 ** 31))
    def test_declared_dimension_and_unit_norm(self, d, seed):
        v = mock_hash_embed("text", d, seed)
        assert v.shape == (d,)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-9


class TestMockHashEmbed:
    def test_deterministic(self):
        np.testing.assert_array_equal(mock_hash_embed("tokyo", 8, 42), mock_hash_embed("tokyo", 8, 42))

    def test_seed_matters(self):
        assert not np.allclose(mock_hash_embed("tokyo", 8, 42), mock_hash_embed("tokyo", 8, 43))

    def test_d_too_small(self):
        with pytest.raises(ValidationError):
            mock_hash_embed("x", 1)

    @pytest.mark.parametrize("d", [2, 8, 64, 1536])
    def test_group_members_close(self, d):
        members = [mock_hash_embed(f"text {i}", d, 5, group="g1") for i in range(8)]
        for u, v in itertools.combinations(members, 2):
            assert float(u @ v) >= 0.95

    def test_fixture_corpus_groups_separate(self):
        # exhaustive scan over every planted text in the shipped fixtures
        groups = multihop_groups()
        vecs = {t: mock_hash_embed(t, 64, 7, g) for t, g in groups.items()}
        for (t1, v1), (t2, v2) in itertools.combinations(vecs.items(), 2):
            sim = float(v1 @ v2)
            if groups[t1] == groups[t2]:
                assert sim >= 0.95
            else:
                assert sim < 0.9

    def test_different_groups_rarely_similar(self):
        sims = [float(mock_hash_embed("a", 64, s, "g1") @ mock_hash_embed("b", 64, s, "g2")) for s in range(200)]
        assert max(sims) < 0.9


class _Instrumented(ChatProvider):
    def __init__(self, policy):
        super().__init__(policy)
        self.in_flight = 0
        self.peak = 0
        self._guard = threading.Lock()

    def _complete(self, req):
        with self._guard:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        time.sleep(0.005)
        with self._guard:
            self.in_flight -= 1
        return req.user


@pytest.mark.parametrize("bound", [1, 3])
def test_concurrency_bound(bound):
    chat = _Instrumented(ProviderPolicy(max_concurrent_requests=bound, retry_count=0))
    with ThreadPoolExecutor(max_workers=12) as pool:
        out = list(pool.map(lambda i: chat.complete(ChatRequest(user=str(i))), range(40)))
    assert out == [str(i) for i in range(40)]
    assert 1 <= chat.peak <= bound


def test_retry_then_success():
    attempts = []

    class Flaky(ChatProvider):
        def _complete(self, req):
            attempts.append(1)
            if len(attempts) < 3:
                raise TransportError("blip")
            return "fine"

    assert Flaky(ProviderPolicy(retry_count=2, **NO_WAIT)).complete(ChatRequest(user="x")) == "fine"
    assert len(attempts) == 3


def test_settings_from_env():
    env = {"EVENTMEM_API_BASE": "http://local:8000/v1", "OPENAI_API_KEY": "k", "EVENTMEM_EMBED_DIM": "256",
           "EVENTMEM_CHAT_MODEL": "gpt-4.1-mini"}
    s = ProviderSettings.from_env({"retry_count": "1"}, environ=env)
    assert (s.base_url, s.api_key, s.dim, s.chat_model, s.retry_count) == \
        ("http://local:8000/v1", "k", 256, "gpt-4.1-mini", 1)
    chat, emb = s.build()
    assert emb.dim == 256 and chat.model == "gpt-4.1-mini"
    assert ProviderSettings.from_env(environ={}).embed_model == "text-embedding-3-small"


def test_load_mock_providers(tmp_path):
    (tmp_path / "chat.json").write_text(json.dumps({"ping": "pong"}))
    (tmp_path / "embeddings.json").write_text(json.dumps({"dim": 12, "seed": 3, "groups": {"a": "g"}}))
    chat, emb = load_mock_providers(tmp_path)
    assert chat.complete(ChatRequest(user="ping")) == "pong"
    np.testing.assert_array_equal(emb.embed("a"), mock_hash_embed("a", 12, 3, "g"))
