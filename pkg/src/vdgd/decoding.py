"""The grounded decoding loop.

A self-generated description is prepended to the instruction; at every step
the next-token distribution is truncated to its plausible candidates, each
candidate is scored by its minimum one-hot KL divergence to the recorded
prompt-position distributions, the candidate logits are replaced with the
negated scores, and the next token is sampled from the resulting softmax.

The per-step score of a candidate w reduces to -ln(max_j q_j[w]) over the
grounding positions j, so a one-time per-vocabulary max (the grounding
index) makes each step's scoring O(K) instead of O(V*M*K) overall while
producing bit-identical scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backends.base import Backend
from .dist import (
    KL_FLOOR,
    CandidateSet,
    Distribution,
    LogitVector,
    softmax,
    truncate_alpha,
    truncate_elbow,
)

__all__ = [
    "DecodeError",
    "TruncationConfig",
    "SamplerConfig",
    "DecodeConfig",
    "PromptContext",
    "GroundingIndex",
    "GroundingTable",
    "StepDiagnostics",
    "DecodedResponse",
    "build_grounded_prompt",
    "precompute_grounding_index",
    "grounding_scores",
    "rescore",
    "sample_token",
    "decode_step",
    "decode",
    "generate_description",
    "load_decode_config",
    "default_describe_template",
]

TRUNCATION_STRATEGIES = ("elbow", "alpha", "alpha_then_elbow")
GROUNDING_POSITIONS = ("description_only", "full_prompt")
SAMPLER_KINDS = ("greedy", "multinomial")


class DecodeError(RuntimeError):
    """Raised for decoding-pipeline failures (configuration, backend, inputs)."""


@dataclass(frozen=True)
class TruncationConfig:
    """Which plausibility cut to apply per step.

    ``alpha_then_elbow`` composes the two: the alpha filter first, the elbow
    on the survivors.
    """

    strategy: str = "elbow"
    alpha: float = 0.1

    def __post_init__(self) -> None:
        if self.strategy not in TRUNCATION_STRATEGIES:
            raise DecodeError(f"unknown truncation strategy {self.strategy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DecodeError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    """Final token selection: greedy argmax (ties to the lowest id) or
    nucleus sampling with temperature."""

    kind: str = "greedy"
    top_p: float = 0.5
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise DecodeError(f"unknown sampler {self.kind!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise DecodeError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise DecodeError("sampler temperature must be positive")


@dataclass(frozen=True)
class DecodeConfig:
    """Everything that shapes one decode session.

    ``grounding_enabled=False`` drops the KL rescoring (truncated original
    probabilities are renormalized and sampled); ``image_enabled=False``
    withholds the image handle from the backend. ``stop_tokens`` of None
    defers to the backend's metadata.
    """

    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    grounding_positions: str = "description_only"
    grounding_enabled: bool = True
    image_enabled: bool = True
    rescore_temperature: float = 1.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    max_tokens: int = 256
    stop_tokens: frozenset[int] | None = None
    kl_floor: float = KL_FLOOR

    def __post_init__(self) -> None:
        if self.grounding_positions not in GROUNDING_POSITIONS:
            raise DecodeError(f"unknown grounding_positions {self.grounding_positions!r}")
        if self.rescore_temperature <= 0:
            raise DecodeError("rescore_temperature must be positive")
        if self.max_tokens < 0:
            raise DecodeError("max_tokens must be nonnegative")
        if self.kl_floor <= 0:
            raise DecodeError("kl_floor must be positive")


@dataclass(frozen=True)
class PromptContext:
    """The concatenated prompt: description prefix of length M, then the
    instruction (with any joiner folded into the instruction side), total
    length n. ``prompt_distributions`` holds the teacher-forced next-token
    distribution at every prompt position once the backend pass has run
    (position 1 is conditioned on the begin-of-sequence context)."""

    description_tokens: tuple[int, ...]
    instruction_tokens: tuple[int, ...]
    image: object | None = None
    prompt_distributions: tuple[Distribution, ...] | None = None

    @property
    def M(self) -> int:
        return len(self.description_tokens)

    @property
    def n(self) -> int:
        return len(self.description_tokens) + len(self.instruction_tokens)

    @property
    def prompt_tokens(self) -> tuple[int, ...]:
        return self.description_tokens + self.instruction_tokens


@dataclass(frozen=True)
class GroundingIndex:
    """Per-vocabulary-token maximum probability over the selected prompt
    positions, with the (1-based) position achieving it. Ties go to the
    earliest position."""

    max_prob: np.ndarray
    argmax_position: np.ndarray
    positions: tuple[int, int]


@dataclass(frozen=True)
class GroundingTable:
    """Deviation scores for one step's candidates: score[w] is the minimum
    one-hot KL of w against the grounding positions, achieved at
    ``argmin_position[w]``. Arrays align with the candidate order."""

    token_ids: np.ndarray
    scores: np.ndarray
    argmin_position: np.ndarray

    def score(self, token_id: int) -> float:
        idx = np.flatnonzero(self.token_ids == token_id)
        if idx.size == 0:
            raise KeyError(f"token {token_id} not in grounding table")
        return float(self.scores[idx[0]])

    def scores_by_token(self) -> dict[int, float]:
        return {int(t): float(s) for t, s in zip(self.token_ids, self.scores)}


@dataclass(frozen=True)
class StepDiagnostics:
    candidates: CandidateSet
    grounding: GroundingTable | None
    sampled: int
    rescored: Distribution


@dataclass(frozen=True)
class DecodedResponse:
    """Generated tokens plus optional per-step diagnostics. ``stopped_by`` is
    either "stop_token" or "max_tokens"."""

    tokens: tuple[int, ...]
    per_step: tuple[StepDiagnostics, ...] | None
    stopped_by: str


def build_grounded_prompt(
    description: Sequence[int],
    instruction: Sequence[int],
    joiner: Sequence[int] = (),
) -> PromptContext:
    """Concatenate description ++ joiner ++ instruction.

    The joiner is folded into the instruction side so the description region
    [1, M] stays pure for grounding.
    """
    if len(description) == 0:
        raise DecodeError("nothing to ground on: description is empty")
    if len(instruction) == 0:
        raise DecodeError("instruction is empty")
    return PromptContext(
        description_tokens=tuple(int(t) for t in description),
        instruction_tokens=tuple(int(t) for t in joiner) + tuple(int(t) for t in instruction),
    )


def precompute_grounding_index(ctx: PromptContext, positions: str = "description_only") -> GroundingIndex:
    """One O(V*M) pass over the prompt distributions; afterwards every
    candidate's grounding score is a single lookup."""
    if positions not in GROUNDING_POSITIONS:
        raise DecodeError(f"unknown grounding_positions {positions!r}")
    dists = ctx.prompt_distributions
    if dists is None:
        raise DecodeError("prompt distributions not populated; run the teacher-forced pass first")
    hi = ctx.M if positions == "description_only" else ctx.n
    if hi < 1:
        raise DecodeError("empty grounding position selection")
    if len(dists) < hi:
        raise DecodeError(f"prompt distributions cover {len(dists)} positions, need {hi}")
    best = np.array(dists[0].probs, dtype=np.float64)
    argpos = np.ones(best.size, dtype=np.int64)
    for j in range(1, hi):
        p = dists[j].probs
        argpos[p > best] = j + 1
        np.maximum(best, p, out=best)
    best.setflags(write=False)
    argpos.setflags(write=False)
    return GroundingIndex(max_prob=best, argmax_position=argpos, positions=(1, hi))


def grounding_scores(
    candidates: CandidateSet, index: GroundingIndex, floor: float = KL_FLOOR
) -> GroundingTable:
    """Score each candidate as -ln(max(index.max_prob[w], floor)).

    Equal to the brute-force minimum over positions of the one-hot KL,
    because -ln is strictly decreasing.
    """
    ids = candidates.token_ids
    maxp = np.maximum(index.max_prob[ids], floor)
    return GroundingTable(
        token_ids=ids,
        scores=-np.log(maxp),
        argmin_position=index.argmax_position[ids].copy(),
    )


def rescore(
    candidates: CandidateSet,
    table: GroundingTable,
    temperature: float,
    vocab_size: int,
) -> Distribution:
    """Replace each candidate's logit with its negated deviation score and
    softmax; non-candidates get exactly zero.

    The original probabilities are discarded: this is replacement, not
    interpolation.
    """
    if not np.array_equal(table.token_ids, candidates.token_ids):
        raise DecodeError("grounding table domain must equal the candidate set")
    logits = np.full(vocab_size, -np.inf)
    logits[candidates.token_ids] = -table.scores
    return softmax(LogitVector(logits), temperature)


def _renormalized(candidates: CandidateSet, vocab_size: int) -> Distribution:
    probs = np.zeros(vocab_size, dtype=np.float64)
    probs[candidates.token_ids] = candidates.probs / candidates.probs.sum()
    return Distribution(probs)


def _truncate(dist: Distribution, trunc: TruncationConfig) -> CandidateSet:
    if trunc.strategy == "elbow":
        return truncate_elbow(dist)
    if trunc.strategy == "alpha":
        return truncate_alpha(dist, trunc.alpha)
    survivors = truncate_alpha(dist, trunc.alpha)
    return truncate_elbow(_renormalized(survivors, dist.vocab_size))


def sample_token(dist: Distribution, sampler: SamplerConfig, rng: np.random.Generator | None = None) -> int:
    """Draw one token. Greedy ties break toward the lowest id; multinomial
    applies temperature then the nucleus (top-p) cutoff."""
    if sampler.kind == "greedy":
        return dist.argmax()
    if rng is None:
        raise DecodeError("multinomial sampling needs a seeded generator")
    probs = dist.probs
    support = probs > 0
    if sampler.temperature != 1.0:
        tempered = np.zeros_like(probs)
        tempered[support] = np.exp(np.log(probs[support]) / sampler.temperature)
        probs = tempered / tempered.sum()
    ids = np.flatnonzero(probs > 0)
    order = ids[np.argsort(-probs[ids], kind="stable")]
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, sampler.top_p, side="left"))
    keep = order[: min(cut + 1, order.size)]
    p = probs[keep] / probs[keep].sum()
    return int(rng.choice(keep, p=p))


def decode_step(
    backend: Backend,
    state: Sequence[int],
    ctx: PromptContext,
    cfg: DecodeConfig,
    *,
    index: GroundingIndex | None = None,
    rng: np.random.Generator | None = None,
    step_index: int = 0,
) -> tuple[int, StepDiagnostics]:
    """One decode step over prompt ++ state. ``index`` should be the session's
    precomputed grounding index; it is rebuilt here only for one-off use."""
    context = ctx.prompt_tokens + tuple(int(t) for t in state)
    try:
        dist = backend.next_distribution(context, image=ctx.image)
    except Exception as exc:
        raise DecodeError(f"backend failure at step {step_index}: {exc}") from exc
    candidates = _truncate(dist, cfg.truncation)
    if cfg.grounding_enabled:
        if index is None:
            index = precompute_grounding_index(ctx, cfg.grounding_positions)
        table = grounding_scores(candidates, index, cfg.kl_floor)
        restricted = rescore(candidates, table, cfg.rescore_temperature, dist.vocab_size)
    else:
        table = None
        restricted = _renormalized(candidates, dist.vocab_size)
    token = sample_token(restricted, cfg.sampler, rng)
    return token, StepDiagnostics(candidates=candidates, grounding=table, sampled=token, rescored=restricted)


def decode(
    backend: Backend,
    description: Sequence[int],
    instruction: Sequence[int],
    image: object | None = None,
    cfg: DecodeConfig | None = None,
    *,
    joiner: Sequence[int] = (),
    diagnostics: bool = False,
    rng: np.random.Generator | None = None,
) -> DecodedResponse:
    """Run the full grounded decode: prompt assembly, teacher-forced prompt
    pass, grounding index, then the sampling loop until a stop token or
    ``max_tokens``."""
    cfg = cfg or DecodeConfig()
    ctx = build_grounded_prompt(description, instruction, joiner=joiner)
    ctx = replace(ctx, image=image if cfg.image_enabled else None)
    index = None
    if cfg.grounding_enabled:
        try:
            dists = backend.forward(ctx.prompt_tokens, image=ctx.image)
        except Exception as exc:
            raise DecodeError(f"teacher-forced prompt pass failed: {exc}") from exc
        ctx = replace(ctx, prompt_distributions=tuple(dists))
        index = precompute_grounding_index(ctx, cfg.grounding_positions)
    stop = cfg.stop_tokens if cfg.stop_tokens is not None else backend.capabilities().stop_tokens
    if rng is None:
        rng = np.random.default_rng(0)
    tokens: list[int] = []
    steps: list[StepDiagnostics] = []
    stopped_by = "max_tokens"
    for i in range(cfg.max_tokens):
        token, diag = decode_step(backend, tokens, ctx, cfg, index=index, rng=rng, step_index=i)
        tokens.append(token)
        if diagnostics:
            steps.append(diag)
        if token in stop:
            stopped_by = "stop_token"
            break
    return DecodedResponse(
        tokens=tuple(tokens),
        per_step=tuple(steps) if diagnostics else None,
        stopped_by=stopped_by,
    )


def _plain_decode(
    backend: Backend,
    prompt: tuple[int, ...],
    image: object | None,
    cfg: DecodeConfig,
    rng: np.random.Generator,
) -> list[int]:
    """Ungrounded decode loop over an arbitrary prompt (used for description
    generation)."""
    stop = cfg.stop_tokens if cfg.stop_tokens is not None else backend.capabilities().stop_tokens
    ctx = PromptContext(description_tokens=prompt, instruction_tokens=(), image=image)
    plain = replace(cfg, grounding_enabled=False)
    tokens: list[int] = []
    for i in range(cfg.max_tokens):
        token, _ = decode_step(backend, tokens, ctx, plain, rng=rng, step_index=i)
        tokens.append(token)
        if token in stop:
            break
    while tokens and tokens[-1] in stop:
        tokens.pop()
    return tokens


def generate_description(
    backend: Backend,
    image: object | None,
    cfg: DecodeConfig | None = None,
    *,
    template_tokens: Sequence[int] | None = None,
    provider: Callable[[object | None], Sequence[int]] | None = None,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Produce the description prefix.

    Resolution order: an external provider hook wins outright; then a
    backend's canned description for the image; finally a standard ungrounded
    decode of the description prompt template. Trailing stop tokens are
    stripped so the prefix composes cleanly.
    """
    if provider is not None:
        return [int(t) for t in provider(image)]
    cfg = cfg or DecodeConfig()
    canned = backend.describe(image)
    if canned is not None:
        return [int(t) for t in canned]
    if template_tokens is None or len(template_tokens) == 0:
        raise DecodeError("no description source: supply template tokens or a provider hook")
    if rng is None:
        rng = np.random.default_rng(0)
    return _plain_decode(backend, tuple(int(t) for t in template_tokens), image, cfg, rng)


def default_describe_template() -> str:
    """Text of the bundled description prompt template."""
    path = Path(__file__).parent / "assets" / "describe_prompt.txt"
    return path.read_text(encoding="utf-8")


_CONFIG_KEYS = {
    "truncation",
    "alpha",
    "grounding_positions",
    "grounding_enabled",
    "image_enabled",
    "rescore_temperature",
    "sampler",
    "top_p",
    "temperature",
    "max_tokens",
    "stop_tokens",
    "kl_floor",
}

_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def load_decode_config(path: str | Path) -> DecodeConfig:
    """Parse a ``key = value`` config file; keys match the DecodeConfig field
    names (truncation and sampler parameters are flattened)."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DecodeError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_KEYS:
                raise DecodeError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value

    def boolean(key: str, default: bool) -> bool:
        if key not in values:
            return default
        token = values[key].lower()
        if token not in _BOOLS:
            raise DecodeError(f"{path}: {key} must be true or false, got {values[key]!r}")
        return _BOOLS[token]

    trunc = TruncationConfig(
        strategy=values.get("truncation", "elbow"),
        alpha=float(values.get("alpha", 0.1)),
    )
    sampler = SamplerConfig(
        kind=values.get("sampler", "greedy"),
        top_p=float(values.get("top_p", 0.5)),
        temperature=float(values.get("temperature", 0.7)),
    )
    stop: frozenset[int] | None = None
    if "stop_tokens" in values:
        text = values["stop_tokens"]
        stop = frozenset(int(t) for t in text.replace(",", " ").split()) if text else frozenset()
    return DecodeConfig(
        truncation=trunc,
        grounding_positions=values.get("grounding_positions", "description_only"),
        grounding_enabled=boolean("grounding_enabled", True),
        image_enabled=boolean("image_enabled", True),
        rescore_temperature=float(values.get("rescore_temperature", 1.0)),
        sampler=sampler,
        max_tokens=int(values.get("max_tokens", 256)),
        stop_tokens=stop,
        kl_floor=float(values.get("kl_floor", KL_FLOOR)),
    )
