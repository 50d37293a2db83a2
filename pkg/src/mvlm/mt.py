"""Machine-translation clients.

Translation runs behind a two-method interface so the forge can be driven
by a remote service in production and by a deterministic mock in tests.
"""

from __future__ import annotations

import logging
import os
import time
from typing import Protocol, Sequence

import requests

from .languages import TRAINING_LANGUAGES

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "MVLM_MT_ENDPOINT"


class MTError(RuntimeError):
    pass


class MTClient(Protocol):
    def translate(self, texts: Sequence[str], source: str, target: str) -> list: ...

    def supported_languages(self) -> set: ...


class MockMT:
    """Tags every text with the target code: ``"cat" -> "cat [de]"``."""

    def __init__(self, languages=TRAINING_LANGUAGES):
        self._languages = set(languages)

    def translate(self, texts, source, target):
        if target not in self._languages:
            raise MTError(f"unsupported target language {target!r}")
        return [f"{t} [{target}]" for t in texts]

    def supported_languages(self):
        return set(self._languages)


class RecordingMT:
    """Wraps a client and keeps every ``(texts, source, target)`` call."""

    def __init__(self, inner: MTClient):
        self.inner = inner
        self.calls = []

    def translate(self, texts, source, target):
        self.calls.append((list(texts), source, target))
        return self.inner.translate(texts, source, target)

    def supported_languages(self):
        return self.inner.supported_languages()

    @property
    def translated_texts(self) -> list:
        return [t for texts, _, _ in self.calls for t in texts]


class HttpMT:
    """Client for ``POST {endpoint}/translate``.

    Request ``{"texts": [...], "src": "en", "tgt": code}``, response
    ``{"translations": [...]}``. Non-200 answers and transport errors are
    retried ``retries`` times before raising :class:`MTError`.
    """

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, languages=TRAINING_LANGUAGES, session=None):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise MTError(f"no MT endpoint given and ${ENDPOINT_ENV} is unset")
        self.url = endpoint.rstrip("/") + "/translate"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._languages = set(languages)
        self.session = session or requests.Session()

    def supported_languages(self):
        return set(self._languages)

    def translate(self, texts, source, target):
        texts = list(texts)
        if not texts:
            return []
        body = {"texts": texts, "src": source, "tgt": target}
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(self.url, json=body, timeout=self.timeout)
                if resp.status_code == 200:
                    out = resp.json()["translations"]
                    if len(out) != len(texts):
                        raise MTError(f"MT returned {len(out)} translations for {len(texts)} texts")
                    return list(out)
                last = MTError(f"MT service answered HTTP {resp.status_code}: {resp.text[:200]}")
            except requests.RequestException as exc:
                last = MTError(f"MT request failed: {exc}")
            if attempt < self.retries:
                logger.warning("MT attempt %d failed (%s); retrying", attempt + 1, last)
                time.sleep(self.backoff * 2**attempt)
        raise last
