"""Chat client: wire protocol, retries, reply extraction."""

from __future__ import annotations

import json

import httpx
import pytest

from conceptevo.errors import ParseError, ServiceError
from conceptevo.llm import (
    HttpChatBackend,
    ReplayChatBackend,
    extract_json_array,
    extract_json_object,
)


class TestExtraction:
    def test_plain_object(self):
        assert extract_json_object('{"a": 1}') == {"a": 1}

    def test_fenced_object(self):
        content = 'Sure!\n```json\n{"reasoning": "r", "x": []}\n```'
        assert extract_json_object(content)["reasoning"] == "r"

    def test_prose_wrapped_array(self):
        assert extract_json_array('Here you go: ["a", "b"] hope that helps') == ["a", "b"]

    def test_missing_object_raises(self):
        with pytest.raises(ParseError):
            extract_json_object("no braces here")

    def test_braces_but_invalid(self):
        with pytest.raises(ParseError):
            extract_json_object("{not json}")


def chat_transport(handler):
    return httpx.MockTransport(handler)


class TestHttpChatBackend:
    def test_success(self):
        def handler(request):
            body = json.loads(request.content)
            assert body["model"] == "m"
            assert request.url.path == "/v1/chat/completions"
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "hello"}}]}
            )

        backend = HttpChatBackend(
            "http://chat.test", "m", transport=chat_transport(handler)
        )
        assert backend.complete([{"role": "user", "content": "hi"}]) == "hello"

    def test_retries_then_service_error(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(500, json={"error": "boom"})

        backend = HttpChatBackend(
            "http://chat.test", "m", max_retries=3, transport=chat_transport(handler)
        )
        with pytest.raises(ServiceError):
            backend.complete([{"role": "user", "content": "hi"}])
        assert calls["n"] == 3

    def test_recovers_after_transient_failure(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                return httpx.Response(503, json={})
            return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

        backend = HttpChatBackend(
            "http://chat.test", "m", max_retries=3, transport=chat_transport(handler)
        )
        assert backend.complete([{"role": "user", "content": "hi"}]) == "ok"


class TestReplay:
    def test_hit_and_miss(self):
        backend = ReplayChatBackend({"prompt": "reply"})
        assert backend.complete([{"role": "user", "content": "prompt"}]) == "reply"
        with pytest.raises(ServiceError):
            backend.complete([{"role": "user", "content": "unknown"}])
