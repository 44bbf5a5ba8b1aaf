from __future__ import annotations

import math

import numpy as np
import pytest

from vdgd import (
    CandidateSet,
    DecodeConfig,
    DecodeError,
    Distribution,
    PromptContext,
    SamplerConfig,
    TruncationConfig,
    build_grounded_prompt,
    decode,
    decode_step,
    generate_description,
    grounding_scores,
    kl_full,
    load_decode_config,
    precompute_grounding_index,
    rescore,
    sample_token,
)
from vdgd.backends import Backend, BackendCapabilities

from conftest import greedy_session, random_distribution, trace_backend_from


def ctx_with_dists(dists, m=None) -> PromptContext:
    m = m if m is not None else len(dists)
    ctx = PromptContext(
        description_tokens=tuple(range(m)),
        instruction_tokens=tuple(range(m, len(dists))),
        prompt_distributions=tuple(dists),
    )
    return ctx


def onehot(target: int, vocab_size: int) -> Distribution:
    probs = np.zeros(vocab_size)
    probs[target] = 1.0
    return Distribution(probs)


class TestBuildGroundedPrompt:
    def test_plain_concatenation(self):
        ctx = build_grounded_prompt([10, 11], [20])
        assert ctx.prompt_tokens == (10, 11, 20)
        assert ctx.M == 2 and ctx.n == 3

    def test_joiner_folds_into_instruction(self):
        ctx = build_grounded_prompt([10], [20, 21], joiner=[15])
        assert ctx.prompt_tokens == (10, 15, 20, 21)
        assert ctx.M == 1 and ctx.n == 4
        assert ctx.n == len(ctx.description_tokens) + len(ctx.instruction_tokens)

    def test_empty_description_errors(self):
        with pytest.raises(DecodeError, match="nothing to ground on"):
            build_grounded_prompt([], [20])

    def test_empty_instruction_errors(self):
        with pytest.raises(DecodeError):
            build_grounded_prompt([10], [])


class TestGroundingIndex:
    def test_single_position(self):
        ctx = ctx_with_dists([Distribution.from_probs([0.7, 0.3])])
        index = precompute_grounding_index(ctx, "description_only")
        assert index.max_prob == pytest.approx([0.7, 0.3])

    def test_elementwise_max(self):
        ctx = ctx_with_dists(
            [Distribution.from_probs([0.7, 0.3]), Distribution.from_probs([0.1, 0.9])]
        )
        index = precompute_grounding_index(ctx, "description_only")
        assert index.max_prob == pytest.approx([0.7, 0.9])
        assert list(index.argmax_position) == [1, 2]

    def test_score_from_index(self):
        ctx = ctx_with_dists(
            [Distribution.from_probs([0.7, 0.3]), Distribution.from_probs([0.1, 0.9])]
        )
        index = precompute_grounding_index(ctx)
        cands = CandidateSet(np.array([1]), np.array([0.5]))
        table = grounding_scores(cands, index)
        assert table.score(1) == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_position_selector_ranges(self):
        dists = [Distribution.from_probs([1.0, 0.0]), Distribution.from_probs([0.0, 1.0])]
        ctx = ctx_with_dists(dists, m=1)
        desc_only = precompute_grounding_index(ctx, "description_only")
        full = precompute_grounding_index(ctx, "full_prompt")
        assert desc_only.max_prob == pytest.approx([1.0, 0.0])
        assert full.max_prob == pytest.approx([1.0, 1.0])

    def test_unpopulated_distributions_error(self):
        ctx = PromptContext(description_tokens=(1,), instruction_tokens=(2,))
        with pytest.raises(DecodeError, match="not populated"):
            precompute_grounding_index(ctx)

    def test_empty_position_selection_error(self):
        ctx = PromptContext(
            description_tokens=(),
            instruction_tokens=(2,),
            prompt_distributions=(Distribution.from_probs([1.0, 0.0]),),
        )
        with pytest.raises(DecodeError, match="empty grounding position"):
            precompute_grounding_index(ctx, "description_only")

    def test_ties_go_to_earliest_position(self):
        d = Distribution.from_probs([0.5, 0.5])
        ctx = ctx_with_dists([d, d])
        index = precompute_grounding_index(ctx)
        assert list(index.argmax_position) == [1, 1]


class TestGroundingScores:
    def test_perfectly_grounded_token(self):
        ctx = ctx_with_dists([Distribution.from_probs([1.0, 0.0])])
        table = grounding_scores(
            CandidateSet(np.array([0]), np.array([0.9])), precompute_grounding_index(ctx)
        )
        assert table.score(0) == 0.0

    def test_quarter_probability(self):
        ctx = ctx_with_dists([Distribution.from_probs([0.25, 0.75])])
        table = grounding_scores(
            CandidateSet(np.array([0]), np.array([0.9])), precompute_grounding_index(ctx)
        )
        assert table.score(0) == pytest.approx(1.386294, abs=1e-6)

    def test_absent_token_hits_floor(self):
        ctx = ctx_with_dists([Distribution.from_probs([1.0, 0.0])])
        table = grounding_scores(
            CandidateSet(np.array([1]), np.array([0.9])),
            precompute_grounding_index(ctx),
            floor=1e-12,
        )
        assert table.score(1) == pytest.approx(27.631021115928547, abs=1e-9)

    def test_index_matches_bruteforce_min(self, rng):
        # Grounding equivalence: the index path must match the brute-force
        # minimum over positions of the one-hot KL, bit-for-bit in ordering.
        for _ in range(50):
            vocab = int(rng.integers(4, 33))
            n_pos = int(rng.integers(1, 9))
            dists = [random_distribution(rng, vocab) for _ in range(n_pos)]
            ctx = ctx_with_dists(dists)
            index = precompute_grounding_index(ctx)
            k = int(rng.integers(1, min(6, vocab)))
            ids = rng.choice(vocab, size=k, replace=False)
            probs = np.sort(rng.dirichlet(np.ones(k)))[::-1]
            cands = CandidateSet(ids, probs)
            table = grounding_scores(cands, index)
            for tid in cands.token_ids:
                brute = min(kl_full(onehot(int(tid), vocab), q) for q in dists)
                assert table.score(int(tid)) == pytest.approx(brute, abs=1e-9)


class TestRescore:
    def test_derived_ratio(self):
        cands = CandidateSet(np.array([4, 9]), np.array([0.6, 0.4]))
        table_scores = np.array([0.0, math.log(3)])
        from vdgd.decoding import GroundingTable

        table = GroundingTable(
            token_ids=np.array([4, 9]), scores=table_scores, argmin_position=np.array([1, 1])
        )
        dist = rescore(cands, table, temperature=1.0, vocab_size=12)
        assert dist[4] == pytest.approx(0.75)
        assert dist[9] == pytest.approx(0.25)
        assert float(dist.probs.sum()) == pytest.approx(1.0)

    def test_equal_scores_give_uniform(self):
        from vdgd.decoding import GroundingTable

        cands = CandidateSet(np.array([0, 1, 2]), np.array([0.5, 0.3, 0.2]))
        table = GroundingTable(
            token_ids=np.array([0, 1, 2]),
            scores=np.array([2.0, 2.0, 2.0]),
            argmin_position=np.array([1, 1, 1]),
        )
        dist = rescore(cands, table, temperature=1.0, vocab_size=5)
        assert dist.probs[[0, 1, 2]] == pytest.approx([1 / 3] * 3)

    def test_singleton(self):
        from vdgd.decoding import GroundingTable

        cands = CandidateSet(np.array([3]), np.array([0.2]))
        table = GroundingTable(
            token_ids=np.array([3]), scores=np.array([5.0]), argmin_position=np.array([2])
        )
        dist = rescore(cands, table, temperature=1.0, vocab_size=4)
        assert dist[3] == 1.0

    def test_noncandidates_exactly_zero(self):
        from vdgd.decoding import GroundingTable

        cands = CandidateSet(np.array([1, 3]), np.array([0.6, 0.4]))
        table = GroundingTable(
            token_ids=np.array([1, 3]), scores=np.array([0.5, 0.1]), argmin_position=np.array([1, 1])
        )
        dist = rescore(cands, table, temperature=1.0, vocab_size=6)
        assert dist[0] == 0.0 and dist[2] == 0.0 and dist[4] == 0.0 and dist[5] == 0.0

    def test_original_probabilities_discarded(self):
        # Same scores but wildly different original probabilities must give
        # the same rescored distribution: replacement, not mixing.
        from vdgd.decoding import GroundingTable

        table = GroundingTable(
            token_ids=np.array([0, 1]), scores=np.array([0.3, 0.9]), argmin_position=np.array([1, 1])
        )
        a = rescore(CandidateSet(np.array([0, 1]), np.array([0.99, 0.01])), table, 1.0, 3)
        b = rescore(CandidateSet(np.array([0, 1]), np.array([0.5, 0.5])), table, 1.0, 3)
        assert np.array_equal(a.probs, b.probs)

    def test_zero_kl_dominance(self, rng):
        from vdgd.decoding import GroundingTable

        for _ in range(20):
            k = int(rng.integers(2, 8))
            scores = rng.uniform(0.5, 5.0, size=k)
            scores[0] = 0.0
            ids = np.arange(k)
            probs = np.sort(rng.dirichlet(np.ones(k)))[::-1]
            table = GroundingTable(token_ids=ids, scores=scores, argmin_position=np.ones(k, dtype=int))
            dist = rescore(CandidateSet(ids, probs), table, 1.0, k + 2)
            assert dist[0] == max(dist.probs)

    def test_monotone_in_grounding_probability(self):
        from vdgd.decoding import GroundingTable

        ids = np.array([0, 1])
        probs = np.array([0.6, 0.4])
        last = None
        for p in [0.1, 0.3, 0.6, 0.9]:
            table = GroundingTable(
                token_ids=ids,
                scores=np.array([-math.log(p), 1.0]),
                argmin_position=np.array([1, 1]),
            )
            out = rescore(CandidateSet(ids, probs), table, 1.0, 4)[0]
            if last is not None:
                assert out > last
            last = out

    def test_domain_mismatch_errors(self):
        from vdgd.decoding import GroundingTable

        cands = CandidateSet(np.array([1, 3]), np.array([0.6, 0.4]))
        table = GroundingTable(
            token_ids=np.array([1, 2]), scores=np.array([0.5, 0.1]), argmin_position=np.array([1, 1])
        )
        with pytest.raises(DecodeError, match="domain"):
            rescore(cands, table, 1.0, 6)


class TestSampler:
    def test_greedy_ties_lowest_id(self):
        dist = Distribution.from_probs([0.4, 0.4, 0.2])
        assert sample_token(dist, SamplerConfig(kind="greedy")) == 0

    def test_multinomial_respects_top_p(self, rng):
        dist = Distribution.from_probs([0.6, 0.3, 0.1])
        sampler = SamplerConfig(kind="multinomial", top_p=0.5, temperature=1.0)
        draws = {sample_token(dist, sampler, rng) for _ in range(200)}
        assert draws == {0}  # nucleus of 0.5 keeps only the top token

    def test_multinomial_seeded_reproducible(self):
        dist = Distribution.from_probs([0.5, 0.3, 0.2])
        sampler = SamplerConfig(kind="multinomial", top_p=1.0, temperature=0.7)
        a = [sample_token(dist, sampler, np.random.default_rng(7)) for _ in range(10)]
        b = [sample_token(dist, sampler, np.random.default_rng(7)) for _ in range(10)]
        assert a == b

    def test_multinomial_needs_rng(self):
        with pytest.raises(DecodeError):
            sample_token(Distribution.from_probs([1.0]), SamplerConfig(kind="multinomial"))


class _SpyBackend(Backend):
    """Wraps another backend and records every image argument it sees."""

    def __init__(self, inner):
        self.inner = inner
        self.images_seen = []

    def capabilities(self):
        return self.inner.capabilities()

    def next_distribution(self, context, image=None):
        self.images_seen.append(image)
        return self.inner.next_distribution(context, image=image)

    def forward(self, tokens, image=None):
        self.images_seen.append(image)
        return self.inner.forward(tokens, image=image)


class TestDecodeStep:
    def test_grounding_disabled_greedy_argmax(self, rng):
        dists = [Distribution.from_probs([0.1, 0.6, 0.3])]
        backend = trace_backend_from([1], dists, 3)
        ctx = PromptContext(description_tokens=(), instruction_tokens=(), image=None)
        cfg = DecodeConfig(grounding_enabled=False, stop_tokens=frozenset())
        token, diag = decode_step(backend, [], ctx, cfg)
        assert token == 1
        assert diag.grounding is None

    def test_rescored_ranking_flips_choice(self):
        # Candidates a (p=.4, KL=2.0) and b (p=.35, KL=0.1): grounded greedy
        # picks b because exp(-0.1) > exp(-2.0).
        from vdgd.decoding import GroundingTable

        cands = CandidateSet(np.array([0, 1]), np.array([0.4, 0.35]))
        table = GroundingTable(
            token_ids=np.array([0, 1]), scores=np.array([2.0, 0.1]), argmin_position=np.array([1, 1])
        )
        dist = rescore(cands, table, 1.0, 4)
        assert sample_token(dist, SamplerConfig(kind="greedy")) == 1

    def test_membership_invariant(self, steering_backend, rng):
        desc = steering_backend.describe("umbrella_scene")
        instr = steering_backend.encode("what does the man hold ?")
        cfg = DecodeConfig(max_tokens=8)
        resp = decode(steering_backend, desc, instr, image="umbrella_scene", cfg=cfg, diagnostics=True)
        assert resp.per_step is not None
        for step in resp.per_step:
            assert step.sampled in step.candidates

    def test_backend_failure_attaches_step_index(self, rng):
        backend = trace_backend_from([1], [random_distribution(rng, 4)], 4)
        ctx = PromptContext(description_tokens=(1,), instruction_tokens=(9,))
        cfg = DecodeConfig(grounding_enabled=False, stop_tokens=frozenset())
        with pytest.raises(DecodeError, match="step 0"):
            decode_step(backend, [], ctx, cfg)


class TestDecode:
    def steering_inputs(self, backend):
        desc = backend.describe("umbrella_scene")
        instr = backend.encode("what does the man hold ?")
        return desc, instr

    def test_grounded_steering_fixture(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        cfg = DecodeConfig()  # elbow, greedy, description_only, grounding on
        resp = decode(steering_backend, desc, instr, image="umbrella_scene", cfg=cfg)
        spec = steering_backend.spec
        expected = (spec.token_id("a"), spec.token_id("umbrella"), spec.token_id("<eos>"))
        assert resp.tokens == expected
        assert resp.stopped_by == "stop_token"

    def test_vanilla_greedy_emits_hat(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        cfg = DecodeConfig(grounding_enabled=False)
        resp = decode(steering_backend, desc, instr, image="umbrella_scene", cfg=cfg)
        spec = steering_backend.spec
        assert resp.tokens == (spec.token_id("a"), spec.token_id("hat"), spec.token_id("<eos>"))

    def test_trace_identity_replay(self, rng):
        # Grounding disabled + greedy on a greedy-consistent recording must
        # reproduce the recorded continuation exactly.
        session = greedy_session(rng, vocab_size=16, length=12)
        backend = trace_backend_from(list(session.tokens), session.distributions(), 16)
        prompt = session.tokens[:4]
        expected = session.tokens[4:]
        cfg = DecodeConfig(grounding_enabled=False, max_tokens=len(expected), stop_tokens=frozenset())
        resp = decode(backend, prompt[:2], prompt[2:], cfg=cfg)
        assert resp.tokens == expected

    def test_zero_max_tokens(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        resp = decode(steering_backend, desc, instr, image="umbrella_scene", cfg=DecodeConfig(max_tokens=0))
        assert resp.tokens == ()
        assert resp.stopped_by == "max_tokens"

    def test_image_withheld_when_disabled(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        spy = _SpyBackend(steering_backend)
        cfg = DecodeConfig(image_enabled=False, max_tokens=4)
        decode(spy, desc, instr, image="umbrella_scene", cfg=cfg)
        assert set(spy.images_seen) == {None}

    def test_image_passed_when_enabled(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        spy = _SpyBackend(steering_backend)
        decode(spy, desc, instr, image="umbrella_scene", cfg=DecodeConfig(max_tokens=4))
        assert set(spy.images_seen) == {"umbrella_scene"}

    def test_diagnostics_off_by_default(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        resp = decode(steering_backend, desc, instr, image="umbrella_scene", cfg=DecodeConfig(max_tokens=4))
        assert resp.per_step is None

    def test_greedy_bit_reproducible(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        a = decode(steering_backend, desc, instr, image="umbrella_scene")
        b = decode(steering_backend, desc, instr, image="umbrella_scene")
        assert a.tokens == b.tokens

    def test_full_prompt_positions_mode(self, steering_backend):
        desc, instr = self.steering_inputs(steering_backend)
        cfg = DecodeConfig(grounding_positions="full_prompt")
        resp = decode(steering_backend, desc, instr, image="umbrella_scene", cfg=cfg)
        assert len(resp.tokens) >= 1


class TestGenerateDescription:
    def test_canned_table(self, steering_backend):
        tokens = generate_description(steering_backend, "umbrella_scene")
        assert steering_backend.decode_tokens(tokens) == "the man holds a umbrella"

    def test_provider_hook_verbatim(self, steering_backend):
        tokens = generate_description(steering_backend, None, provider=lambda image: [2, 3])
        assert tokens == [2, 3]

    def test_missing_image_errors(self, steering_backend):
        with pytest.raises(Exception, match="image"):
            generate_description(steering_backend, None)

    def test_template_decode_strips_stop(self, rng):
        # A backend without canned descriptions decodes the template prompt.
        session = greedy_session(rng, vocab_size=8, length=6)
        backend = trace_backend_from(list(session.tokens), session.distributions(), 8)
        cfg = DecodeConfig(grounding_enabled=False, max_tokens=3, stop_tokens=frozenset())
        tokens = generate_description(
            backend, None, cfg, template_tokens=session.tokens[:3], rng=np.random.default_rng(0)
        )
        assert tuple(tokens) == session.tokens[3:6]

    def test_no_source_errors(self, rng):
        backend = trace_backend_from([0], [random_distribution(rng, 4)], 4)
        with pytest.raises(DecodeError, match="no description source"):
            generate_description(backend, None)


class TestDecodeConfigFile:
    def test_round_trip_keys(self, tmp_path):
        cfg_file = tmp_path / "decode.cfg"
        cfg_file.write_text(
            """
            # sampling setup
            truncation = alpha_then_elbow
            alpha = 0.25
            grounding_positions = full_prompt
            grounding_enabled = false
            image_enabled = false
            rescore_temperature = 2.0
            sampler = multinomial
            top_p = 0.9
            temperature = 1.3
            max_tokens = 17
            stop_tokens = 1, 2
            kl_floor = 1e-10
            """
        )
        cfg = load_decode_config(cfg_file)
        assert cfg.truncation.strategy == "alpha_then_elbow"
        assert cfg.truncation.alpha == 0.25
        assert cfg.grounding_positions == "full_prompt"
        assert cfg.grounding_enabled is False
        assert cfg.image_enabled is False
        assert cfg.rescore_temperature == 2.0
        assert cfg.sampler.kind == "multinomial"
        assert cfg.sampler.top_p == 0.9
        assert cfg.sampler.temperature == 1.3
        assert cfg.max_tokens == 17
        assert cfg.stop_tokens == frozenset({1, 2})
        assert cfg.kl_floor == 1e-10

    def test_defaults(self, tmp_path):
        cfg_file = tmp_path / "empty.cfg"
        cfg_file.write_text("")
        cfg = load_decode_config(cfg_file)
        assert cfg.truncation.strategy == "elbow"
        assert cfg.grounding_positions == "description_only"
        assert cfg.sampler.kind == "greedy"
        assert cfg.stop_tokens is None

    def test_unknown_key_errors(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("beam_width = 4\n")
        with pytest.raises(DecodeError, match="unknown key"):
            load_decode_config(cfg_file)

    def test_invalid_strategy_errors(self):
        with pytest.raises(DecodeError):
            TruncationConfig(strategy="nucleus")

    def test_alpha_then_elbow_composes(self):
        # Alpha filter first, elbow on the survivors: alpha=0.5 drops the
        # tail, leaving a two-token plateau the elbow keeps whole.
        from vdgd.decoding import _truncate

        dist = Distribution.from_probs([0.4, 0.4, 0.1, 0.1])
        cands = _truncate(dist, TruncationConfig(strategy="alpha_then_elbow", alpha=0.5))
        assert sorted(cands.token_ids) == [0, 1]
