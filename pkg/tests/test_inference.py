from __future__ import annotations

import numpy as np
import pytest

from sfdr.data_io import BOS, EOS, SyntheticDims, gen_synthetic_corpus
from sfdr.inference import (
    attention_rows,
    beam_search,
    greedy_decode,
    sample_sequence,
    score_sequence,
    step_log_probs,
)
from sfdr.model import CaptionModel, ModelConfig
from sfdr import autodiff as ad

TINY_DIMS = SyntheticDims(d_v=6, d_t=5, H=4, d_g=8, k=3, d_r=7, classes=2)


def tiny_model(seed, vocab_size=7, max_len=4):
    corpus = gen_synthetic_corpus(2, seed=seed, dims=TINY_DIMS)
    cfg = ModelConfig(header=corpus.header, vocab_size=vocab_size, d=8,
                      dec_dim=8, dec_layers=1, dec_heads=2, dec_ffw=8,
                      max_len=max_len)
    model = CaptionModel(cfg, np.random.default_rng(seed))
    return model, corpus.all_bundles()[0]


def zero_model(vocab_size=8, max_len=5):
    model, bundle = tiny_model(0, vocab_size, max_len)
    for t in model.named_params().values():
        t.data = np.zeros_like(t.data)
    return model, bundle


def exhaustive_best(model, bundle, cap):
    """Enumerate every generable sequence and return the best by
    (logprob desc, token ids asc)."""
    with ad.no_grad():
        context = model.forward_context(bundle, use_text=False).context
    allowed = [i for i in range(model.cfg.vocab_size) if i not in (0, 1, 3)]
    results = []

    def rec(prefix, lp):
        if len(prefix) == cap:
            results.append((prefix, lp))
            return
        step = step_log_probs(context, [BOS] + prefix, model)
        for tok in allowed:
            if tok == EOS:
                results.append((prefix + [EOS], lp + float(step[EOS])))
            else:
                rec(prefix + [tok], lp + float(step[tok]))

    rec([], 0.0)
    return min(results, key=lambda r: (-r[1], r[0]))


class TestGreedy:
    def test_all_equal_logits_emit_lowest_content_token(self):
        model, bundle = zero_model(vocab_size=8, max_len=5)
        hyp = greedy_decode(model, bundle)
        assert hyp.tokens.ids == [BOS, 4, 4, 4, 4, 4]
        assert hyp.finished and not hyp.tokens.complete

    def test_matches_beam_one(self):
        for seed in range(10):
            model, bundle = tiny_model(seed)
            greedy = greedy_decode(model, bundle)
            top = beam_search(model, bundle, beam=1)[0]
            assert greedy.tokens.ids == top.tokens.ids
            assert greedy.logprob == pytest.approx(top.logprob, abs=1e-12)

    def test_deterministic(self):
        model, bundle = tiny_model(5)
        a = greedy_decode(model, bundle)
        b = greedy_decode(model, bundle)
        assert a.tokens.ids == b.tokens.ids and a.logprob == b.logprob


class TestBeamSearch:
    def test_rejects_bad_width(self):
        model, bundle = tiny_model(1)
        with pytest.raises(ValueError):
            beam_search(model, bundle, beam=0)

    def test_top1_matches_exhaustive_enumeration_tiny_vocab(self):
        # V_b = 5: EOS plus a single content token
        for seed in range(15):
            model, bundle = tiny_model(seed, vocab_size=5, max_len=4)
            best_seq, best_lp = exhaustive_best(model, bundle, cap=4)
            top = beam_search(model, bundle, beam=5, length_norm=0.0)[0]
            assert top.tokens.ids == [BOS] + best_seq
            assert top.logprob == pytest.approx(best_lp, abs=1e-10)

    def test_top1_matches_exhaustive_enumeration_wider_vocab(self):
        for seed in range(15):
            model, bundle = tiny_model(seed, vocab_size=7, max_len=4)
            best_seq, best_lp = exhaustive_best(model, bundle, cap=4)
            top = beam_search(model, bundle, beam=5, length_norm=0.0)[0]
            assert top.tokens.ids == [BOS] + best_seq
            assert top.logprob == pytest.approx(best_lp, abs=1e-10)

    def test_monotone_in_beam_width(self):
        for seed in range(15):
            model, bundle = tiny_model(seed, vocab_size=7, max_len=4)
            scores = [beam_search(model, bundle, beam=b,
                                  length_norm=0.0)[0].normalized(0.0)
                      for b in (1, 2, 3, 5)]
            for a, b in zip(scores, scores[1:]):
                assert b >= a - 1e-12

    def test_hypotheses_rescore_to_their_logprob(self):
        model, bundle = tiny_model(3, vocab_size=7, max_len=4)
        for hyp in beam_search(model, bundle, beam=4):
            rescored = score_sequence(model, bundle, hyp.tokens)
            assert hyp.logprob == pytest.approx(rescored, abs=1e-10)

    def test_output_sorted_and_deterministic(self):
        model, bundle = tiny_model(4, vocab_size=7, max_len=4)
        hyps_a = beam_search(model, bundle, beam=4)
        hyps_b = beam_search(model, bundle, beam=4)
        assert [h.tokens.ids for h in hyps_a] == [h.tokens.ids for h in hyps_b]
        scores = [h.normalized(0.0) for h in hyps_a]
        assert scores == sorted(scores, reverse=True)

    def test_length_norm_changes_ranking_rule(self):
        model, bundle = tiny_model(6, vocab_size=7, max_len=4)
        plain = beam_search(model, bundle, beam=4, length_norm=0.0)
        normed = beam_search(model, bundle, beam=4, length_norm=1.0)
        for hyp in normed:
            n = max(1, len(hyp.tokens.ids) - 1)
            assert hyp.normalized(1.0) == pytest.approx(hyp.logprob / n)
        assert {tuple(h.tokens.ids) for h in plain} and \
            {tuple(h.tokens.ids) for h in normed}


class TestSampling:
    def test_seeded_sampling_deterministic(self):
        model, bundle = tiny_model(7)
        a = sample_sequence(model, bundle, np.random.default_rng(9))
        b = sample_sequence(model, bundle, np.random.default_rng(9))
        assert a.tokens.ids == b.tokens.ids
        assert a.logprob == pytest.approx(b.logprob, abs=0.0)

    def test_sample_logprob_matches_rescoring(self):
        model, bundle = tiny_model(8)
        hyp = sample_sequence(model, bundle, np.random.default_rng(1))
        assert hyp.logprob == pytest.approx(
            score_sequence(model, bundle, hyp.tokens), abs=1e-10)

    def test_never_emits_blocked_ids(self):
        model, bundle = zero_model()
        for seed in range(20):
            hyp = sample_sequence(model, bundle, np.random.default_rng(seed))
            assert all(t not in (0, 1, 3) for t in hyp.tokens.ids[1:])


class TestAttentionDump:
    def test_rows_are_distributions_over_rois(self):
        model, bundle = tiny_model(9)
        hyp = greedy_decode(model, bundle)
        rows = attention_rows(model, bundle, hyp.tokens)
        k = model.cfg.header.k
        assert rows.shape[1] == k
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(rows.shape[0]),
                                   atol=1e-9)
