"""Grounded decoding toolkit: description-prefixed, KL-rescored sampling plus
base-rank and hallucination-category diagnostics."""

from .dist import (
    CandidateSet,
    Distribution,
    DistributionError,
    LogitStats,
    LogitVector,
    candidate_stats,
    kl_full,
    kl_onehot,
    softmax,
    truncate_alpha,
    truncate_elbow,
)
from .decoding import (
    DecodeConfig,
    DecodeError,
    DecodedResponse,
    GroundingIndex,
    GroundingTable,
    PromptContext,
    SamplerConfig,
    TruncationConfig,
    build_grounded_prompt,
    decode,
    decode_step,
    generate_description,
    grounding_scores,
    load_decode_config,
    precompute_grounding_index,
    rescore,
    sample_token,
)
from .ranks import (
    BaseRankRecord,
    RankCurve,
    RankThresholds,
    base_rank,
    base_rank_trace,
    classify_shift,
    hallucinated_token_stats,
    rank_curve,
    stats_from_backend,
)
from .hallucination import (
    AnnotationSet,
    CategoryReport,
    HallucinationPhrase,
    RetrievalHit,
    StubRetrievalProvider,
    categorize,
    categorize_all,
    load_annotations,
    phrase_in_retrieval,
)
from . import backends

__version__ = "0.1.0"

__all__ = [
    "Distribution",
    "LogitVector",
    "CandidateSet",
    "LogitStats",
    "DistributionError",
    "softmax",
    "kl_onehot",
    "kl_full",
    "truncate_alpha",
    "truncate_elbow",
    "candidate_stats",
    "DecodeConfig",
    "TruncationConfig",
    "SamplerConfig",
    "DecodeError",
    "DecodedResponse",
    "PromptContext",
    "GroundingIndex",
    "GroundingTable",
    "build_grounded_prompt",
    "precompute_grounding_index",
    "grounding_scores",
    "rescore",
    "sample_token",
    "decode_step",
    "decode",
    "generate_description",
    "load_decode_config",
    "BaseRankRecord",
    "RankThresholds",
    "RankCurve",
    "base_rank",
    "classify_shift",
    "base_rank_trace",
    "rank_curve",
    "hallucinated_token_stats",
    "stats_from_backend",
    "HallucinationPhrase",
    "AnnotationSet",
    "RetrievalHit",
    "StubRetrievalProvider",
    "CategoryReport",
    "load_annotations",
    "phrase_in_retrieval",
    "categorize",
    "categorize_all",
    "backends",
    "__version__",
]
