"""Deterministic table-driven toy language model.

A desk-scale verification oracle: next-token distributions come from a
lookup table keyed on the last few context tokens (longest suffix first,
then a default distribution). The model spec is a human-readable YAML file,
so steering fixtures can be hand-written and code-reviewed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from ..dist import Distribution
from .base import Backend, BackendCapabilities, BackendError

__all__ = ["ToyModelSpec", "ToyBackend", "load_toy_spec"]

MAX_CONTEXT_WINDOW = 3


@dataclass(frozen=True)
class ToyModelSpec:
    """Vocabulary, suffix table, default distribution and canned descriptions."""

    vocab: tuple[str, ...]
    table: Mapping[tuple[int, ...], Distribution]
    default_distribution: Distribution
    image_table: Mapping[str, tuple[int, ...]]
    stop_tokens: frozenset[int]
    continuation_prefix: str = "##"

    def __post_init__(self) -> None:
        if len(self.vocab) < 2:
            raise BackendError("toy vocab needs at least 2 tokens")
        if len(set(self.vocab)) != len(self.vocab):
            raise BackendError("toy vocab entries must be unique")
        for suffix, dist in self.table.items():
            if len(suffix) > MAX_CONTEXT_WINDOW:
                raise BackendError(f"context suffix {suffix} longer than {MAX_CONTEXT_WINDOW}")
            if dist.vocab_size != len(self.vocab):
                raise BackendError("table distribution size does not match vocab")
        if self.default_distribution.vocab_size != len(self.vocab):
            raise BackendError("default distribution size does not match vocab")

    def token_id(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise BackendError(f"token {token!r} not in toy vocabulary") from None


class ToyBackend(Backend):
    """Pure-lookup backend over a :class:`ToyModelSpec`; immutable after load."""

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        word_starts = frozenset(
            i for i, tok in enumerate(spec.vocab) if not tok.startswith(spec.continuation_prefix)
        )
        self._caps = BackendCapabilities(
            vocab_size=len(spec.vocab),
            supports_images=bool(spec.image_table),
            supports_teacher_forcing=True,
            stop_tokens=spec.stop_tokens,
            word_start_tokens=word_starts,
        )

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def next_distribution(self, context: Sequence[int], image: object | None = None) -> Distribution:
        ctx = tuple(int(t) for t in context)
        for length in range(min(len(ctx), MAX_CONTEXT_WINDOW), 0, -1):
            dist = self.spec.table.get(ctx[-length:])
            if dist is not None:
                return dist
        return self.spec.table.get((), self.spec.default_distribution)

    def encode(self, text: str) -> list[int]:
        """Whitespace tokenization against the vocabulary; a literal newline
        becomes its own token when the vocabulary carries one."""
        ids: list[int] = []
        nl = self.spec.vocab.index("\n") if "\n" in self.spec.vocab else None
        for line_no, line in enumerate(text.split("\n")):
            if line_no > 0 and nl is not None:
                ids.append(nl)
            ids.extend(self.spec.token_id(word) for word in line.split())
        return ids

    def decode_tokens(self, token_ids: Sequence[int]) -> str:
        words = []
        for t in token_ids:
            if not 0 <= int(t) < len(self.spec.vocab):
                raise BackendError(f"token id {t} outside toy vocabulary")
            words.append(self.spec.vocab[int(t)])
        return " ".join(words)

    def describe(self, image: object | None) -> list[int] | None:
        if not self.spec.image_table:
            return None
        if image is None:
            raise BackendError("toy backend requires an image tag to describe")
        try:
            return list(self.spec.image_table[str(image)])
        except KeyError:
            raise BackendError(f"unknown image tag {image!r}") from None


def _parse_probs(raw: object, vocab: Sequence[str], where: str) -> Distribution:
    if isinstance(raw, Mapping):
        if raw.get("uniform"):
            return Distribution(np.full(len(vocab), 1.0 / len(vocab)))
        probs = np.zeros(len(vocab), dtype=np.float64)
        for token, p in raw.items():
            if token not in vocab:
                raise BackendError(f"{where}: unknown token {token!r}")
            probs[vocab.index(token)] = float(p)
        return Distribution(probs)
    if isinstance(raw, Sequence):
        return Distribution(np.asarray(raw, dtype=np.float64))
    raise BackendError(f"{where}: expected a token->prob map or dense list")


def load_toy_spec(path: str | Path) -> ToyModelSpec:
    """Parse a toy-model YAML file. See docs/formats.md for the schema."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, Mapping):
        raise BackendError(f"{path}: toy spec must be a mapping")
    vocab = tuple(str(t) for t in raw.get("vocab", ()))
    if not vocab:
        raise BackendError(f"{path}: missing vocab")

    def ids_for(tokens: Sequence[str]) -> tuple[int, ...]:
        out = []
        for tok in tokens:
            if tok not in vocab:
                raise BackendError(f"{path}: unknown token {tok!r}")
            out.append(vocab.index(tok))
        return tuple(out)

    table: dict[tuple[int, ...], Distribution] = {}
    for i, entry in enumerate(raw.get("table", ())):
        if "context" not in entry or "probs" not in entry:
            raise BackendError(f"{path}: table entry {i} needs context and probs")
        table[ids_for(entry["context"])] = _parse_probs(entry["probs"], vocab, f"{path}: table entry {i}")

    default = _parse_probs(raw.get("default", {"uniform": True}), vocab, f"{path}: default")
    images = {str(tag): ids_for(tokens) for tag, tokens in (raw.get("images") or {}).items()}
    stop = frozenset(ids_for(raw.get("stop_tokens", ())))
    return ToyModelSpec(
        vocab=vocab,
        table=table,
        default_distribution=default,
        image_table=images,
        stop_tokens=stop,
        continuation_prefix=str(raw.get("continuation_prefix", "##")),
    )
