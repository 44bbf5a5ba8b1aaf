"""Categorizing annotated hallucinated phrases by cause.

Judge-extracted hallucinated phrases arrive in an annotation file together
with the response's visual elements; each phrase is routed to Language,
Vision, Style, or IT using the base rank of its first token, its judge type,
and whether it string-matches the top-k retrieved instruction-tuning
instances. Phrases that are not visual elements are reported as skipped, not
categorized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .ranks import BaseRankRecord

__all__ = [
    "PHRASE_TYPES",
    "CATEGORIES",
    "HallucinationPhrase",
    "AnnotationSet",
    "RetrievalHit",
    "RetrievalProvider",
    "StubRetrievalProvider",
    "PhraseOutcome",
    "CategoryReport",
    "AnnotationError",
    "load_annotations",
    "phrase_in_retrieval",
    "categorize",
    "categorize_all",
    "DEFAULT_RETRIEVAL_K",
]

PHRASE_TYPES = ("object", "relation", "action")
CATEGORIES = ("Language", "Vision", "Style", "IT")
SKIPPED = "Skipped-nonvisual"
DEFAULT_RETRIEVAL_K = 25


class AnnotationError(ValueError):
    """Raised when an annotation or retrieval file violates its schema."""


@dataclass(frozen=True)
class HallucinationPhrase:
    text: str
    token_span: tuple[int, int]
    phrase_type: str

    def __post_init__(self) -> None:
        start, end = self.token_span
        if start >= end:
            raise AnnotationError(f"token_span {self.token_span} must satisfy start < end")
        if self.phrase_type not in PHRASE_TYPES:
            raise AnnotationError(f"phrase_type must be one of {PHRASE_TYPES}, got {self.phrase_type!r}")


@dataclass(frozen=True)
class AnnotationSet:
    """One response's annotations: its tokens, the visual elements present in
    it, the hallucinated phrases, and optional word-start offsets."""

    response_id: str
    response_text: str
    response_tokens: tuple[int, ...]
    visual_elements: tuple[str, ...]
    phrases: tuple[HallucinationPhrase, ...]
    word_offsets: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        n = len(self.response_tokens)
        for phrase in self.phrases:
            start, end = phrase.token_span
            if not (0 <= start and end <= n):
                raise AnnotationError(
                    f"phrase {phrase.text!r} span ({start}, {end}) outside response of {n} tokens"
                )
        for element in self.visual_elements:
            if not element.strip():
                raise AnnotationError("visual elements must be non-empty strings")


@dataclass(frozen=True)
class RetrievalHit:
    instance_id: str
    response_text: str
    similarity: float


class RetrievalProvider(Protocol):
    """Returns ranked (similarity-descending) instruction-tuning instances for
    a response handle. Implementations declare whether concurrent queries are
    safe via ``concurrent_safe``."""

    concurrent_safe: bool

    def retrieve(self, handle: str) -> list[RetrievalHit]: ...


class StubRetrievalProvider:
    """File-backed provider for tests and offline runs: a JSON map from
    response id to its ranked hit list."""

    concurrent_safe = True

    def __init__(self, path: str | Path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise AnnotationError(f"{path}: retrieval stub must map response_id to hit lists")
        self._hits: dict[str, list[RetrievalHit]] = {}
        for rid, hits in raw.items():
            parsed = [
                RetrievalHit(
                    instance_id=str(h["instance_id"]),
                    response_text=str(h["response_text"]),
                    similarity=float(h["similarity"]),
                )
                for h in hits
            ]
            sims = [h.similarity for h in parsed]
            if sims != sorted(sims, reverse=True):
                raise AnnotationError(f"{path}: hits for {rid!r} must be sorted by similarity descending")
            self._hits[rid] = parsed

    def retrieve(self, handle: str) -> list[RetrievalHit]:
        return list(self._hits.get(handle, ()))


def _require(record: dict, field: str, lineno: int, path: object) -> object:
    if field not in record:
        raise AnnotationError(f"{path}:{lineno}: missing field {field!r}")
    return record[field]


def load_annotations(path: str | Path) -> AnnotationSet:
    """Parse one response's annotation file (JSON lines: a header record then
    one record per phrase). Schema violations name the field and line."""
    header: dict | None = None
    phrases: list[HallucinationPhrase] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            kind = record.get("record")
            if kind == "header":
                if header is not None:
                    raise AnnotationError(f"{path}:{lineno}: duplicate header record")
                header = record
                header["_line"] = lineno
            elif kind == "phrase":
                if header is None:
                    raise AnnotationError(f"{path}:{lineno}: phrase record before header")
                span = _require(record, "token_span", lineno, path)
                if not (isinstance(span, list) and len(span) == 2):
                    raise AnnotationError(f"{path}:{lineno}: token_span must be [start, end]")
                try:
                    phrases.append(
                        HallucinationPhrase(
                            text=str(_require(record, "phrase_text", lineno, path)),
                            token_span=(int(span[0]), int(span[1])),
                            phrase_type=str(_require(record, "phrase_type", lineno, path)),
                        )
                    )
                except AnnotationError as exc:
                    raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            else:
                raise AnnotationError(f"{path}:{lineno}: record must be 'header' or 'phrase'")
    if header is None:
        raise AnnotationError(f"{path}: no header record found")
    lineno = header.pop("_line")
    offsets = header.get("word_offsets")
    try:
        return AnnotationSet(
            response_id=str(_require(header, "response_id", lineno, path)),
            response_text=str(_require(header, "response_text", lineno, path)),
            response_tokens=tuple(int(t) for t in _require(header, "response_tokens", lineno, path)),
            visual_elements=tuple(str(v) for v in _require(header, "visual_elements", lineno, path)),
            phrases=tuple(phrases),
            word_offsets=None if offsets is None else tuple(int(o) for o in offsets),
        )
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from None


def phrase_in_retrieval(phrase: str, hits: Sequence[RetrievalHit], k: int) -> bool:
    """Case-insensitive substring match of the phrase inside the top-k hit
    texts."""
    if k < 1:
        raise AnnotationError("retrieval k must be at least 1")
    needle = phrase.lower()
    return any(needle in hit.response_text.lower() for hit in hits[:k])


def _normalize(word: str) -> str:
    word = word.lower().strip(".,;:!?\"'()")
    if len(word) > 3 and word.endswith("s"):
        word = word[:-1]
    return word


def matches_visual_elements(phrase: str, visual_elements: Sequence[str]) -> bool:
    """Case-insensitive exact word match with plural-s stripping: the phrase
    passes if any of its words matches any word of any visual element."""
    element_words = {_normalize(w) for element in visual_elements for w in element.split()}
    element_words.discard("")
    return any(_normalize(w) in element_words for w in phrase.split())


def categorize(
    phrase: HallucinationPhrase,
    eta_of_first_token: int,
    in_retrieval: bool,
) -> str:
    """Branch order: rank 0 is Language; otherwise a retrieval match is IT,
    then a relation phrase is Style, and anything else is Vision.

    Assumes the phrase already passed the visual-element gate.
    """
    if eta_of_first_token < 0:
        raise AnnotationError("eta must be nonnegative")
    if eta_of_first_token == 0:
        return "Language"
    if in_retrieval:
        return "IT"
    if phrase.phrase_type == "relation":
        return "Style"
    return "Vision"


@dataclass(frozen=True)
class PhraseOutcome:
    phrase: HallucinationPhrase
    eta: int | None
    category: str
    error: str | None = None


@dataclass(frozen=True)
class CategoryReport:
    """Per-phrase outcomes plus aggregate counts (categorized phrases only;
    skipped and errored phrases are tallied separately)."""

    response_id: str
    outcomes: tuple[PhraseOutcome, ...]
    counts: dict[str, int]
    skipped: int
    errors: int
    retrieval_k: int

    def to_json(self) -> dict:
        return {
            "response_id": self.response_id,
            "retrieval_k": self.retrieval_k,
            "counts": dict(self.counts),
            "skipped": self.skipped,
            "errors": self.errors,
            "phrases": [
                {
                    "phrase_text": o.phrase.text,
                    "phrase_type": o.phrase.phrase_type,
                    "token_span": list(o.phrase.token_span),
                    "eta": o.eta,
                    "category": o.category,
                    "error": o.error,
                }
                for o in self.outcomes
            ],
        }


def categorize_all(
    annotations: AnnotationSet,
    rank_trace: Sequence[BaseRankRecord],
    provider: RetrievalProvider,
    k: int = DEFAULT_RETRIEVAL_K,
) -> CategoryReport:
    """Route every annotated phrase through the category branches.

    The phrase-level rank is the eta of the first token of the phrase's
    first word (span start). Retrieval is consulted once per response and
    only for phrases that need it (rank > 0); a provider failure yields
    per-phrase error entries while the rest of the report is still emitted.
    """
    if k < 1:
        raise AnnotationError("retrieval k must be at least 1")
    if len(rank_trace) < len(annotations.response_tokens):
        raise AnnotationError(
            f"rank trace covers {len(rank_trace)} positions, response has {len(annotations.response_tokens)}"
        )
    hits: list[RetrievalHit] | None = None
    hits_error: str | None = None
    outcomes: list[PhraseOutcome] = []
    counts = {c: 0 for c in CATEGORIES}
    skipped = errors = 0
    for phrase in annotations.phrases:
        if not matches_visual_elements(phrase.text, annotations.visual_elements):
            outcomes.append(PhraseOutcome(phrase=phrase, eta=None, category=SKIPPED))
            skipped += 1
            continue
        eta = rank_trace[phrase.token_span[0]].eta
        in_retrieval = False
        if eta > 0:
            if hits is None and hits_error is None:
                try:
                    hits = provider.retrieve(annotations.response_id)
                except Exception as exc:
                    hits_error = str(exc)
            if hits_error is not None:
                outcomes.append(
                    PhraseOutcome(phrase=phrase, eta=eta, category="Error", error=hits_error)
                )
                errors += 1
                continue
            in_retrieval = phrase_in_retrieval(phrase.text, hits, k)
        category = categorize(phrase, eta, in_retrieval)
        counts[category] += 1
        outcomes.append(PhraseOutcome(phrase=phrase, eta=eta, category=category))
    return CategoryReport(
        response_id=annotations.response_id,
        outcomes=tuple(outcomes),
        counts=counts,
        skipped=skipped,
        errors=errors,
        retrieval_k=k,
    )
