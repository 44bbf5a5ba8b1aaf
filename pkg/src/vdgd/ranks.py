"""Base-rank analysis over aligned/base backend pairs.

For each response position the aligned model's favorite token is looked up
in the base model's distribution at the same context; the resulting rank
(eta) measures how far alignment moved the choice. Rank 0 means the two
models agree on the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .backends.base import Backend, BackendError
from .dist import CandidateSet, Distribution, LogitStats, candidate_stats

__all__ = [
    "SHIFT_CLASSES",
    "BaseRankRecord",
    "RankThresholds",
    "RankCurve",
    "base_rank",
    "classify_shift",
    "base_rank_trace",
    "rank_curve",
    "hallucinated_token_stats",
    "stats_from_backend",
]

SHIFT_CLASSES = ("unshifted", "marginal", "shifted")


@dataclass(frozen=True)
class RankThresholds:
    """Band edges for shift classification: eta 0 is unshifted, 1..marginal_upper
    is marginal, above that is shifted."""

    marginal_upper: int = 2

    def __post_init__(self) -> None:
        if self.marginal_upper < 1:
            raise ValueError("marginal_upper must be at least 1")


@dataclass(frozen=True)
class BaseRankRecord:
    """One response position: the aligned argmax, its rank in the base
    distribution (0-based), and the shift class."""

    position: int
    aligned_argmax: int
    eta: int
    shift: str

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.shift not in SHIFT_CLASSES:
            raise ValueError(f"unknown shift class {self.shift!r}")


def classify_shift(eta: int, thresholds: RankThresholds = RankThresholds()) -> str:
    """Partition eta into unshifted (0), marginal (1..upper), shifted (>upper)."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0:
        return "unshifted"
    if eta <= thresholds.marginal_upper:
        return "marginal"
    return "shifted"


def base_rank(
    aligned_dist: Distribution,
    base_dist: Distribution,
    position: int = 0,
    thresholds: RankThresholds = RankThresholds(),
) -> BaseRankRecord:
    """Rank of the aligned argmax within the base distribution.

    The rank counts base tokens with strictly greater probability
    (competition ranking), so base-side ties cannot inflate it; aligned-side
    argmax ties resolve to the lowest token id.
    """
    if aligned_dist.vocab_size != base_dist.vocab_size:
        raise ValueError(
            f"vocab mismatch: aligned {aligned_dist.vocab_size} vs base {base_dist.vocab_size}"
        )
    w_star = aligned_dist.argmax()
    eta = int(np.sum(base_dist.probs > base_dist.probs[w_star]))
    return BaseRankRecord(
        position=position,
        aligned_argmax=w_star,
        eta=eta,
        shift=classify_shift(eta, thresholds),
    )


def base_rank_trace(
    aligned: Backend,
    base: Backend,
    instruction: Sequence[int],
    response: Sequence[int],
    image: object | None = None,
    thresholds: RankThresholds = RankThresholds(),
) -> list[BaseRankRecord]:
    """Base rank at every response position.

    The context at position t is instruction ++ response[: t - 1]; the
    aligned backend sees the image, the base backend (the text-only model the
    aligned one was tuned from) does not. Uses one teacher-forced pass per
    backend when supported.
    """
    a_caps, b_caps = aligned.capabilities(), base.capabilities()
    if a_caps.vocab_size != b_caps.vocab_size:
        raise BackendError(
            f"vocabulary mismatch: aligned {a_caps.vocab_size} vs base {b_caps.vocab_size}"
        )
    if not response:
        return []
    full = tuple(int(t) for t in instruction) + tuple(int(t) for t in response)
    n_i = len(instruction)

    def response_dists(backend: Backend, img: object | None) -> list[Distribution]:
        if backend.capabilities().supports_teacher_forcing:
            return backend.forward(full, image=img)[n_i:]
        return [backend.next_distribution(full[: n_i + t], image=img) for t in range(len(response))]

    aligned_dists = response_dists(aligned, image)
    base_dists = response_dists(base, None)
    return [
        base_rank(a, b, position=t + 1, thresholds=thresholds)
        for t, (a, b) in enumerate(zip(aligned_dists, base_dists))
    ]


@dataclass(frozen=True)
class RankCurve:
    """Position-wise mean eta across a set of traces, with per-position
    counts; defined only where at least one trace reaches the position."""

    mean_eta: tuple[float, ...]
    counts: tuple[int, ...]

    def rows(self) -> list[tuple[int, float, int]]:
        """(position, mean_eta, count) rows, 1-based, ready for a plot or TSV."""
        return [(i + 1, m, c) for i, (m, c) in enumerate(zip(self.mean_eta, self.counts))]


def rank_curve(traces: Sequence[Sequence[BaseRankRecord]]) -> RankCurve:
    """Average eta by response position over possibly ragged traces."""
    if not traces:
        raise ValueError("rank_curve requires at least one trace")
    longest = max(len(t) for t in traces)
    sums = np.zeros(longest, dtype=np.float64)
    counts = np.zeros(longest, dtype=np.int64)
    for trace in traces:
        for i, rec in enumerate(trace):
            sums[i] += rec.eta
            counts[i] += 1
    mean = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return RankCurve(mean_eta=tuple(float(m) for m in mean), counts=tuple(int(c) for c in counts))


def _word_start_flags(
    response: Sequence[int],
    word_offsets: Sequence[int] | None,
    word_start_tokens: frozenset[int] | None,
) -> np.ndarray:
    """Boolean mask over response positions marking the first token of each
    word, from explicit offsets or the backend's token-metadata rule."""
    flags = np.zeros(len(response), dtype=bool)
    if word_offsets is not None:
        for off in word_offsets:
            if not 0 <= off < len(response):
                raise ValueError(f"word offset {off} outside response of length {len(response)}")
            flags[off] = True
        return flags
    if word_start_tokens is None:
        raise ValueError(
            "no word-boundary source: backend has no word-start metadata and no offsets were supplied"
        )
    for i, tok in enumerate(response):
        flags[i] = int(tok) in word_start_tokens
    return flags


def hallucinated_token_stats(
    step_distributions: Sequence[Distribution],
    halluc_spans: Sequence[tuple[int, int]],
    truncate: Callable[[Distribution], CandidateSet],
    word_offsets: Sequence[int] | None = None,
    word_start_tokens: frozenset[int] | None = None,
    response: Sequence[int] | None = None,
) -> tuple[LogitStats | None, LogitStats | None]:
    """Post-truncation statistics split into (clean, hallucinated) populations.

    ``step_distributions[t]`` is the model's distribution at response position
    t (0-based). Only the first token of each word contributes; spans are
    half-open (start, end) token ranges into the response. Either population
    may be empty, yielding None on that side.
    """
    n = len(step_distributions)
    for start, end in halluc_spans:
        if not (0 <= start < end <= n):
            raise ValueError(f"span ({start}, {end}) outside response of length {n}")
    if response is None and word_offsets is None:
        raise ValueError("need the response tokens unless word offsets are supplied")
    flags = _word_start_flags(
        response if response is not None else [0] * n, word_offsets, word_start_tokens
    )
    in_span = np.zeros(n, dtype=bool)
    for start, end in halluc_spans:
        in_span[start:end] = True
    clean_sets, halluc_sets = [], []
    for t, dist in enumerate(step_distributions):
        if not flags[t]:
            continue
        (halluc_sets if in_span[t] else clean_sets).append(truncate(dist))
    clean = candidate_stats(clean_sets) if clean_sets else None
    halluc = candidate_stats(halluc_sets) if halluc_sets else None
    return clean, halluc


def stats_from_backend(
    backend: Backend,
    prompt: Sequence[int],
    response: Sequence[int],
    halluc_spans: Sequence[tuple[int, int]],
    truncate: Callable[[Distribution], CandidateSet],
    word_offsets: Sequence[int] | None = None,
    image: object | None = None,
) -> tuple[LogitStats | None, LogitStats | None]:
    """Teacher-force the backend over prompt ++ response and split the
    post-truncation statistics of the response steps by the hallucinated
    spans. Word boundaries come from the backend's token metadata unless
    explicit offsets are given."""
    full = tuple(int(t) for t in prompt) + tuple(int(t) for t in response)
    dists = backend.forward(full, image=image)[len(prompt) :]
    return hallucinated_token_stats(
        dists,
        halluc_spans,
        truncate,
        word_offsets=word_offsets,
        word_start_tokens=backend.capabilities().word_start_tokens,
        response=response,
    )
