from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from vdgd import Distribution
from vdgd.backends import ToyBackend, TraceBackend, TraceSession, load_toy_spec

FIXTURES = Path(__file__).parent / "fixtures"


def random_distribution(rng: np.random.Generator, vocab_size: int, concentration: float = 1.0) -> Distribution:
    """Dirichlet draw; low concentration gives peaked shapes, high gives flat."""
    return Distribution(rng.dirichlet(np.full(vocab_size, concentration)))


def random_sparse_distribution(rng: np.random.Generator, vocab_size: int, support: int) -> Distribution:
    """Distribution with an exact zero-probability tail."""
    probs = np.zeros(vocab_size)
    ids = rng.choice(vocab_size, size=min(support, vocab_size), replace=False)
    probs[ids] = rng.dirichlet(np.ones(ids.size))
    return Distribution(probs)


def trace_backend_from(tokens, distributions, vocab_size, tokenizer_id="test") -> TraceBackend:
    return TraceBackend(
        TraceSession.from_distributions(tokens, distributions, vocab_size, tokenizer_id=tokenizer_id)
    )


def greedy_session(rng: np.random.Generator, vocab_size: int, length: int) -> TraceSession:
    """Random session whose recorded tokens are each step's argmax, so greedy
    replay must reproduce them exactly."""
    tokens, dists = [], []
    for _ in range(length):
        d = random_distribution(rng, vocab_size, concentration=0.3)
        tokens.append(d.argmax())
        dists.append(d)
    return TraceSession.from_distributions(tokens, dists, vocab_size)


@pytest.fixture
def steering_backend() -> ToyBackend:
    return ToyBackend(load_toy_spec(FIXTURES / "steering.yaml"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
