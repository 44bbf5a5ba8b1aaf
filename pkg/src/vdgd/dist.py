"""Probability-distribution primitives for grounded decoding.

Everything downstream (truncation, grounding, rank analysis) is built on
dense probability vectors over a token vocabulary. All types here are
immutable after construction and all operations are pure functions, so they
are safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "KL_FLOOR",
    "ELBOW_SCAN_WINDOW",
    "Distribution",
    "LogitVector",
    "CandidateSet",
    "LogitStats",
    "softmax",
    "kl_onehot",
    "kl_full",
    "truncate_alpha",
    "truncate_elbow",
    "candidate_stats",
]

# Floor applied inside every log/KL computation. Keeps scores finite for
# zero-probability tokens while preserving their ordering.
KL_FLOOR = 1e-12

# Elbow truncation only scans this many highest-probability tokens; for
# softmax outputs the cumulative curve past this rank is flat at machine
# precision, and the cap keeps the per-step sort out of O(V log V).
ELBOW_SCAN_WINDOW = 1000

_SUM_TOL = 1e-6


class DistributionError(ValueError):
    """Raised when a probability or logit vector violates its invariants."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Distribution:
    """Dense probability vector over token ids.

    Invariants: entries are nonnegative, the vector sums to 1 within 1e-6,
    and ``vocab_size`` equals the vector length.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise DistributionError("probs must be a non-empty 1-d vector")
        if not np.all(np.isfinite(probs)):
            raise DistributionError("probs must be finite")
        if np.any(probs < 0):
            raise DistributionError("probs must be nonnegative")
        total = float(probs.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise DistributionError(f"probs sum to {total!r}, expected 1 within {_SUM_TOL}")
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)

    def __getitem__(self, token_id: int) -> float:
        return float(self.probs[token_id])

    def argmax(self) -> int:
        """Most probable token id; ties broken toward the lowest id."""
        return int(np.argmax(self.probs))

    @classmethod
    def from_probs(cls, probs: Iterable[float]) -> "Distribution":
        if not isinstance(probs, np.ndarray):
            probs = np.array(list(probs), dtype=np.float64)
        return cls(probs)


@dataclass(frozen=True)
class LogitVector:
    """Dense real-valued scores per token id.

    Entries are finite, except for the exact ``-inf`` sentinel left behind by
    truncation; ``-inf`` maps to probability zero under :func:`softmax`.
    """

    logits: np.ndarray

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 1 or logits.size == 0:
            raise DistributionError("logits must be a non-empty 1-d vector")
        bad = ~np.isfinite(logits) & ~np.isneginf(logits)
        if np.any(bad):
            raise DistributionError("logits must be finite or the -inf sentinel")
        object.__setattr__(self, "logits", _freeze(logits))

    @property
    def vocab_size(self) -> int:
        return int(self.logits.size)


@dataclass(frozen=True)
class CandidateSet:
    """Plausible tokens surviving truncation, with their original probabilities.

    Entries are sorted by probability descending, ties broken by ascending
    token id; probabilities are strictly positive.
    """

    token_ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.token_ids, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if ids.ndim != 1 or ids.size == 0 or ids.shape != probs.shape:
            raise DistributionError("candidate set needs at least one (id, prob) pair")
        if np.unique(ids).size != ids.size:
            raise DistributionError("candidate token ids must be unique")
        if np.any(probs <= 0) or np.any(probs > 1):
            raise DistributionError("candidate probabilities must lie in (0, 1]")
        if np.any(np.diff(probs) > 0):
            raise DistributionError("candidate probabilities must be non-increasing")
        object.__setattr__(self, "token_ids", _freeze(ids))
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def k(self) -> int:
        return int(self.token_ids.size)

    def entries(self) -> list[tuple[int, float]]:
        return [(int(t), float(p)) for t, p in zip(self.token_ids, self.probs)]

    def __contains__(self, token_id: int) -> bool:
        return bool(np.any(self.token_ids == token_id))


@dataclass(frozen=True)
class LogitStats:
    """Averaged post-truncation statistics: candidate count, variance, range
    and mean of the kept probabilities."""

    k: float
    variance: float
    range: float
    avg: float
    n_sets: int = field(default=0)

    def __post_init__(self) -> None:
        if self.variance < 0 or self.range < 0:
            raise DistributionError("variance and range must be nonnegative")
        if not 0.0 <= self.avg <= 1.0:
            raise DistributionError("avg must lie in [0, 1]")


def softmax(logits: LogitVector | np.ndarray | Sequence[float], temperature: float = 1.0) -> Distribution:
    """Temperature softmax, computed stably via max-subtraction in log space.

    ``-inf`` sentinel entries receive exactly zero probability. Raises if the
    temperature is not positive or no finite logit remains.
    """
    if temperature <= 0:
        raise DistributionError("temperature must be positive")
    vec = logits.logits if isinstance(logits, LogitVector) else np.asarray(logits, dtype=np.float64)
    finite = np.isfinite(vec)
    if not np.any(finite):
        raise DistributionError("empty support: every logit is the -inf sentinel")
    scaled = vec[finite] / temperature
    shifted = scaled - scaled.max()
    weights = np.exp(shifted)
    out = np.zeros(vec.size, dtype=np.float64)
    out[finite] = weights / weights.sum()
    return Distribution(out)


def kl_onehot(target: int, q: Distribution, floor: float = KL_FLOOR) -> float:
    """KL(one-hot(target) || q), which reduces to ``-ln(max(q[target], floor))``.

    All one-hot entries other than ``target`` contribute nothing, so the full
    divergence collapses to a single negative log.
    """
    if not 0 <= target < q.vocab_size:
        raise DistributionError(f"target id {target} outside vocab of size {q.vocab_size}")
    return -math.log(max(q[target], floor))


def kl_full(p: Distribution, q: Distribution, floor: float = KL_FLOOR) -> float:
    """Brute-force KL(p || q) = sum_i p_i ln(p_i / max(q_i, floor)).

    Uses the 0*ln(0/.) = 0 convention. Serves as the independent oracle for
    :func:`kl_onehot`.
    """
    if p.vocab_size != q.vocab_size:
        raise DistributionError("p and q must share a vocabulary size")
    pi = p.probs
    qi = np.maximum(q.probs, floor)
    support = pi > 0
    return float(np.sum(pi[support] * np.log(pi[support] / qi[support])))


def _sorted_positive(dist: Distribution, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and probabilities of the positive-probability tokens, sorted by
    probability descending with ties broken by ascending id."""
    probs = dist.probs
    positive = np.flatnonzero(probs > 0)
    if limit is not None and positive.size > limit:
        # Keep the top-`limit` probabilities; ties at the cut go to the
        # lowest token ids (flatnonzero order is ascending id).
        part = np.argpartition(-probs[positive], limit - 1)
        thresh = probs[positive[part[limit - 1]]]
        above = positive[probs[positive] > thresh]
        at = positive[probs[positive] == thresh]
        positive = np.concatenate([above, at[: limit - above.size]])
    order = np.argsort(-probs[positive], kind="stable")
    ids = positive[order]
    return ids, probs[ids]


def truncate_alpha(dist: Distribution, alpha: float) -> CandidateSet:
    """Plausibility truncation: keep tokens with p >= alpha * max(p).

    alpha=0 keeps the full positive support; alpha=1 keeps only the argmax
    set (including exact ties).
    """
    if not 0.0 <= alpha <= 1.0:
        raise DistributionError("alpha must lie in [0, 1]")
    ids, probs = _sorted_positive(dist)
    threshold = alpha * float(probs[0])
    keep = probs >= threshold
    return CandidateSet(ids[keep], probs[keep])


def truncate_elbow(dist: Distribution, scan_window: int = ELBOW_SCAN_WINDOW) -> CandidateSet:
    """Elbow truncation: cut the sorted-probability cumulative curve at its
    point of maximum curvature.

    The curve runs from the origin (0, 0) through the cumulative sums
    (r, C_r) for ranks r = 1..N over the positive-probability tokens (N capped
    by ``scan_window``); the kept count k is the rank farthest from the
    straight line joining the curve's endpoints. A perfectly linear curve
    (all kept probabilities equal) breaks the tie toward the larger k, so an
    equally-confident plateau is kept whole.
    """
    ids, probs = _sorted_positive(dist, limit=max(1, scan_window))
    n = ids.size
    if n == 1:
        return CandidateSet(ids, probs)
    cum = np.cumsum(probs)
    # Perpendicular distance from (r, cum_r) to the line through (0, 0) and
    # (n, cum_n) is |cum_r * n - r * cum_n| / hypot(n, cum_n); the divisor is
    # shared, so the argmax needs only the cross term. Distances within the
    # accumulated-rounding tolerance of the maximum count as ties (an
    # equal-probability plateau is exactly linear only in real arithmetic).
    ranks = np.arange(1, n + 1, dtype=np.float64)
    cross = np.abs(cum * n - ranks * cum[-1])
    best = float(cross.max())
    atol = 4.0 * n * n * np.finfo(np.float64).eps
    k = int(np.flatnonzero(cross >= best - atol)[-1]) + 1
    return CandidateSet(ids[:k], probs[:k])


def candidate_stats(sets: Sequence[CandidateSet]) -> LogitStats:
    """Average per-set statistics of the kept probabilities across sets.

    k is the mean candidate count; variance, range, and avg are computed per
    set over its kept probabilities and then averaged across sets.
    """
    if len(sets) == 0:
        raise DistributionError("candidate_stats requires at least one set")
    ks, variances, ranges, avgs = [], [], [], []
    for cset in sets:
        probs = cset.probs
        spread = float(probs.max() - probs.min())
        ks.append(cset.k)
        # A zero-range set has zero variance by definition; np.var would
        # report mean-subtraction noise (~1e-35) instead of an exact 0.
        variances.append(float(np.var(probs)) if spread > 0 else 0.0)
        ranges.append(spread)
        avgs.append(float(probs.mean()))
    return LogitStats(
        k=float(np.mean(ks)),
        variance=float(np.mean(variances)),
        range=float(np.mean(ranges)),
        avg=float(np.mean(avgs)),
        n_sets=len(sets),
    )
