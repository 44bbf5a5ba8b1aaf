"""Model-abstraction layer: the contract every backend satisfies."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

from ..dist import Distribution

__all__ = ["Backend", "BackendCapabilities", "BackendError", "TraceMissError"]


class BackendError(RuntimeError):
    """Raised when a backend cannot serve a request."""


class TraceMissError(BackendError):
    """Raised by replay backends when the queried context was never recorded.

    ``matched_prefix_len`` reports how many leading context tokens agreed
    with the recording before the miss.
    """

    def __init__(self, message: str, matched_prefix_len: int):
        super().__init__(message)
        self.matched_prefix_len = matched_prefix_len


@dataclass(frozen=True)
class BackendCapabilities:
    """What a backend can do, declared up front.

    ``word_start_tokens`` is the optional token-metadata rule for "first token
    of a word": the set of token ids that begin a new word. Backends without
    token metadata leave it None and callers fall back to a supplied
    word-offset file. ``max_concurrent_sessions`` of None means unbounded.
    """

    vocab_size: int
    supports_images: bool = False
    supports_teacher_forcing: bool = True
    stop_tokens: frozenset[int] = frozenset()
    word_start_tokens: frozenset[int] | None = None
    max_concurrent_sessions: int | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise BackendError("vocab_size must be at least 2")


class Backend(ABC):
    """Next-token distribution source.

    Context is always a token-id sequence; tokenization is out of scope
    (text <-> id mapping lives with whoever produced the tokens). Backends
    declared deterministic must return bit-identical distributions for
    identical inputs.
    """

    @abstractmethod
    def capabilities(self) -> BackendCapabilities: ...

    @abstractmethod
    def next_distribution(self, context: Sequence[int], image: object | None = None) -> Distribution:
        """Distribution of the next token given ``context`` (possibly empty:
        the begin-of-sequence context)."""

    def forward(self, tokens: Sequence[int], image: object | None = None) -> list[Distribution]:
        """Teacher-forced pass: one distribution per position, position j
        conditioned on tokens[: j - 1].

        The default implementation runs ``next_distribution`` per position;
        backends that cannot teacher-force raise instead.
        """
        if not self.capabilities().supports_teacher_forcing:
            raise BackendError(
                "backend does not support teacher forcing; "
                "call next_distribution once per position instead"
            )
        return [self.next_distribution(tokens[:j], image=image) for j in range(len(tokens))]

    # Optional text mapping. Backends whose vocabulary has a textual form
    # (the toy model) override these; id-only backends keep the errors.
    def encode(self, text: str) -> list[int]:
        raise BackendError("backend has no text encoder; supply token ids directly")

    def decode_tokens(self, token_ids: Sequence[int]) -> str:
        raise BackendError("backend has no text decoder")

    def describe(self, image: object | None) -> list[int] | None:
        """Canned image description, if this backend ships one. None means
        the caller must decode a description prompt instead."""
        return None
