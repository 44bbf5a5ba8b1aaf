"""HTTP client backend for an external next-token logit server.

Wire protocol (version 1, JSON over POST; see docs/formats.md):

  GET  /capabilities -> {"protocol_version", "vocab_size", "supports_images",
                         "supports_teacher_forcing", "stop_tokens",
                         "max_concurrent_sessions"}
  POST /next    {"context": [ids], "image": str|null} -> one distribution
  POST /forward {"tokens": [ids], "image": str|null} -> {"distributions": [...]}

A distribution is either dense {"vocab_size", "probs": [...]} or sparse
{"vocab_size", "entries": [[id, prob], ...], "residual_mass": r}. Every
response's vocab_size must match the capabilities handshake.

Requests within one session are issued in order over a pooled connection.
Only the idempotent ``forward`` call is retried on transient failures.
"""

from __future__ import annotations

import time
from typing import Mapping, Sequence

import numpy as np
import requests

from ..dist import Distribution
from .base import Backend, BackendCapabilities, BackendError

__all__ = ["HttpBackend", "PROTOCOL_VERSION"]

PROTOCOL_VERSION = 1


class HttpBackend(Backend):
    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        forward_retries: int = 2,
        retry_backoff: float = 0.1,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.forward_retries = forward_retries
        self.retry_backoff = retry_backoff
        self._http = session or requests.Session()
        self._caps = self._handshake()

    def _handshake(self) -> BackendCapabilities:
        try:
            resp = self._http.get(f"{self.base_url}/capabilities", timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise BackendError(f"capabilities handshake with {self.base_url} failed: {exc}") from exc
        if payload.get("protocol_version") != PROTOCOL_VERSION:
            raise BackendError(
                f"server speaks protocol {payload.get('protocol_version')}, client expects {PROTOCOL_VERSION}"
            )
        return BackendCapabilities(
            vocab_size=int(payload["vocab_size"]),
            supports_images=bool(payload.get("supports_images", False)),
            supports_teacher_forcing=bool(payload.get("supports_teacher_forcing", True)),
            stop_tokens=frozenset(int(t) for t in payload.get("stop_tokens", ())),
            max_concurrent_sessions=payload.get("max_concurrent_sessions"),
        )

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def _parse_distribution(self, payload: Mapping) -> Distribution:
        vocab_size = int(payload["vocab_size"])
        if vocab_size != self._caps.vocab_size:
            raise BackendError(
                f"response vocab_size {vocab_size} does not match handshake {self._caps.vocab_size}"
            )
        if "probs" in payload:
            return Distribution(np.asarray(payload["probs"], dtype=np.float64))
        probs = np.zeros(vocab_size, dtype=np.float64)
        entries = payload.get("entries", ())
        ids = np.array([int(e[0]) for e in entries], dtype=np.int64)
        probs[ids] = [float(e[1]) for e in entries]
        residual = float(payload.get("residual_mass", 0.0))
        absent = vocab_size - ids.size
        if absent > 0 and residual > 0:
            mask = np.ones(vocab_size, dtype=bool)
            mask[ids] = False
            probs[mask] = residual / absent
        return Distribution(probs)

    def _post(self, endpoint: str, body: dict, retries: int) -> Mapping:
        last_exc: Exception | None = None
        for attempt in range(retries + 1):
            try:
                resp = self._http.post(f"{self.base_url}/{endpoint}", json=body, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < retries:
                    time.sleep(self.retry_backoff * (attempt + 1))
        raise BackendError(f"{endpoint} request failed: {last_exc}") from last_exc

    def next_distribution(self, context: Sequence[int], image: object | None = None) -> Distribution:
        body = {"context": [int(t) for t in context], "image": None if image is None else str(image)}
        return self._parse_distribution(self._post("next", body, retries=0))

    def forward(self, tokens: Sequence[int], image: object | None = None) -> list[Distribution]:
        if not self._caps.supports_teacher_forcing:
            raise BackendError(
                "backend does not support teacher forcing; "
                "call next_distribution once per position instead"
            )
        body = {"tokens": [int(t) for t in tokens], "image": None if image is None else str(image)}
        payload = self._post("forward", body, retries=self.forward_retries)
        return [self._parse_distribution(d) for d in payload["distributions"]]
