"""Chat-completions clients.

HttpChatBackend speaks the standard /v1/chat/completions wire protocol.
ReplayChatBackend serves recorded responses keyed by the user message, for
offline fixtures. Both are thread-safe; evolution fans calls out across a
bounded pool.
"""

from __future__ import annotations

import json
import os
import threading
import time
from typing import Protocol

import httpx

from .errors import ParseError, ServiceError

API_KEY_ENV = "CONCEPTEVO_API_KEY"


class ChatBackend(Protocol):
    def complete(self, messages: list[dict]) -> str:
        """Return the assistant message content for one chat exchange."""
        ...


class HttpChatBackend:
    """OpenAI-compatible chat client with exponential-backoff retries."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        temperature: float = 0.7,
        max_tokens: int = 1024,
        timeout: float = 60.0,
        max_retries: int = 3,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_retries = max_retries
        headers = {}
        api_key = os.environ.get(API_KEY_ENV, "").strip()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, messages: list[dict]) -> str:
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        url = f"{self.endpoint}/v1/chat/completions"
        last_err: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self._client.post(url, json=payload)
                if resp.status_code >= 500:
                    raise ServiceError(f"HTTP {resp.status_code} from {url}")
                resp.raise_for_status()
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except (httpx.HTTPError, ServiceError, KeyError, IndexError, ValueError) as err:
                last_err = err
                if attempt + 1 < self.max_retries:
                    time.sleep(min(2.0**attempt, 8.0))
        raise ServiceError(f"chat request failed after {self.max_retries} attempts: {last_err}")


class ReplayChatBackend:
    """Serves canned responses keyed by the exact user message content."""

    def __init__(self, responses: dict[str, str]):
        self._responses = dict(responses)
        self._lock = threading.Lock()
        self.calls = 0

    @staticmethod
    def load(path: str) -> "ReplayChatBackend":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return ReplayChatBackend(doc["responses"])

    def complete(self, messages: list[dict]) -> str:
        key = messages[-1]["content"]
        with self._lock:
            self.calls += 1
        if key not in self._responses:
            raise ServiceError(f"no recorded response for prompt of length {len(key)}")
        return self._responses[key]


def extract_json_object(content: str) -> dict:
    """Pull the first JSON object out of a chat reply, tolerating code fences."""
    decoder = json.JSONDecoder()
    for start in range(len(content)):
        if content[start] != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(content[start:])
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseError("no JSON object found in model reply")


def extract_json_array(content: str) -> list:
    """Pull the first JSON array out of a chat reply."""
    decoder = json.JSONDecoder()
    for start in range(len(content)):
        if content[start] != "[":
            continue
        try:
            arr, _ = decoder.raw_decode(content[start:])
        except ValueError:
            continue
        if isinstance(arr, list):
            return arr
    raise ParseError("no JSON array found in model reply")
