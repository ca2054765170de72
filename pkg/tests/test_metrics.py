from __future__ import annotations

import numpy as np
import pytest

from sfdr import metrics
from sfdr.metrics import (
    CiderIdf,
    MetricInputError,
    aggregate,
    bleu,
    cider,
    cider_sentence,
    evaluate,
    format_report,
    meteor_lite,
    rouge_l,
)

from oracles import (
    oracle_bleu,
    oracle_cider,
    oracle_meteor_lite,
    oracle_rouge_l,
)

VOCAB = ["a", "the", "boat", "river", "cars", "road", "trees", "green", "two",
         "big", "planes", "water", "field", "house", "near", "on"]


def rand_sentence(rng, lo=1, hi=12):
    n = int(rng.integers(lo, hi + 1))
    return [VOCAB[int(rng.integers(len(VOCAB)))] for _ in range(n)]


def rand_fixture(rng):
    n_img = int(rng.integers(2, 11))
    refs = [[rand_sentence(rng) for _ in range(int(rng.integers(1, 4)))]
            for _ in range(n_img)]
    cands = [rand_sentence(rng) for _ in range(n_img)]
    return cands, refs


# fixture with disjoint per-image vocabulary so that every idf is positive;
# candidates equal the first reference of each image
EXACT_REFS = [
    [["boat", "sails", "on", "river"], ["boat", "moves", "down", "river"]],
    [["cars", "drive", "along", "roads"], ["many", "cars", "cross", "roads"]],
    [["planes", "rest", "near", "hangar"], ["two", "planes", "park", "hangar"]],
]
EXACT_CANDS = [r[0] for r in EXACT_REFS]
# frozen from tests/oracles.py oracle_cider on this fixture (raw 0-10 scale)
EXACT_FIXTURE_RAW = 5.625


class TestBleu:
    def test_perfect_match(self):
        cands = [["many", "cars", "on", "the", "road"]]
        scores = bleu(cands * 2, [[c] for c in cands * 2])
        assert scores == [100.0] * 4

    def test_disjoint_vocabulary(self):
        scores = bleu([["boat", "river"]], [[["cars", "road"]]])
        assert scores == [0.0] * 4

    def test_brevity_penalty_anchor(self):
        scores = bleu([["the", "cat"]], [[["the", "cat", "sat"]]])
        assert scores[0] == pytest.approx(60.65, abs=0.01)
        assert scores[0] == pytest.approx(100.0 * np.exp(1 - 3 / 2), abs=1e-9)

    def test_empty_corpus_rejected(self):
        with pytest.raises(MetricInputError):
            bleu([], [])

    def test_empty_reference_set_rejected(self):
        with pytest.raises(MetricInputError):
            bleu([["a"]], [[]])


class TestRougeL:
    def test_identical_pair(self):
        assert rouge_l([["a", "b", "c"]], [[["a", "b", "c"]]]) == pytest.approx(100.0)

    def test_lcs_anchor(self):
        score = rouge_l([["a", "b", "c", "d"]], [[["a", "c", "b", "d"]]])
        assert score == pytest.approx(75.0, abs=1e-9)

    def test_empty_candidate(self):
        assert rouge_l([[]], [[["a", "b"]]]) == 0.0

    def test_max_over_references(self):
        score = rouge_l([["a", "b"]], [[["x", "y"], ["a", "b"]]])
        assert score == pytest.approx(100.0)


class TestCider:
    def test_disjoint_candidate_scores_zero(self):
        cands = [["boat"], ["cars"]]
        refs = [[["green", "field"]], [["big", "house"]]]
        assert cider(cands, refs) == 0.0

    def test_exact_fixture_matches_frozen_oracle_value(self):
        raw = cider(EXACT_CANDS, EXACT_REFS, reporting_scale=False)
        assert raw == pytest.approx(EXACT_FIXTURE_RAW, abs=1e-12)
        idf = CiderIdf.from_references(EXACT_REFS)
        assert min(idf.idf(g) for g in idf.doc_freq) > 0

    def test_reporting_scale_is_100x_raw(self):
        raw = cider(EXACT_CANDS, EXACT_REFS, reporting_scale=False)
        reported = cider(EXACT_CANDS, EXACT_REFS)
        assert reported == pytest.approx(100.0 * raw)

    def test_single_image_degenerates_to_zero_with_warning(self):
        with pytest.warns(UserWarning, match="single-image"):
            score = cider([["boat", "river"]], [[["boat", "river"]]])
        assert score == 0.0

    def test_idf_is_corpus_global(self):
        # the same pair contributes differently once an overlapping image
        # joins: "boat" loses idf weight relative to the rest of the pair
        cand = ["boat", "on", "river"]
        refs = [["boat", "on", "water"]]
        other = [["cars", "cross", "roads"]]
        extra = [["boat", "near", "trees"]]
        idf_small = CiderIdf.from_references([refs, other])
        idf_large = CiderIdf.from_references([refs, other, extra])
        small = cider_sentence(cand, refs, idf_small)
        large = cider_sentence(cand, refs, idf_large)
        assert small != large

    def test_variant_d_with_identical_pair_high(self):
        score = cider(EXACT_CANDS, EXACT_REFS, variant="d", reporting_scale=False)
        assert 0.0 < score <= 10.0


class TestMeteorLite:
    def test_identical_long_sentence(self):
        sent = ["a", "b", "c", "d", "e", "f", "g", "h"]
        score = meteor_lite([sent], [[sent]])
        assert 99.0 < score < 100.0
        assert score == pytest.approx(100.0 * (1 - 0.5 / 8 ** 3), abs=1e-9)

    def test_no_overlap(self):
        assert meteor_lite([["a"]], [[["b"]]]) == 0.0

    def test_single_token_match(self):
        assert meteor_lite([["a"]], [[["a"]]]) == pytest.approx(50.0)

    def test_fragmentation_penalty_rises_with_chunks(self):
        ref = [["a", "b", "c", "d"]]
        ordered = meteor_lite([["a", "b", "c", "d"]], [ref])
        shuffled = meteor_lite([["b", "a", "d", "c"]], [ref])
        assert shuffled < ordered


class TestAggregate:
    def test_sydney_row(self):
        s_m, s_m_star = aggregate(71.72, 47.34, 79.74, 328.64, 45.22)
        assert f"{s_m:.2f}" == "131.86"
        assert f"{s_m_star:.2f}" == "114.53"

    def test_ucm_row(self):
        s_m, s_m_star = aggregate(82.31, 54.76, 88.40, 448.76, 57.58)
        assert f"{s_m:.2f}" == "168.56"
        assert f"{s_m_star:.2f}" == "146.36"

    def test_rsicd_row(self):
        s_m, s_m_star = aggregate(44.81, 34.10, 61.31, 283.11, 46.15)
        assert f"{s_m:.2f}" == "105.83"
        assert f"{s_m_star:.2f}" == "93.90"

    def test_zero_components(self):
        s_m, s_m_star = aggregate(0, 0, 0, 0)
        assert s_m == 0.0 and s_m_star is None

    def test_star_absent_without_spice(self):
        report = evaluate(EXACT_CANDS, EXACT_REFS)
        assert report.s_m_star is None and report.spice is None

    def test_star_present_with_spice(self):
        report = evaluate(EXACT_CANDS, EXACT_REFS, spice=50.0)
        assert report.s_m_star == pytest.approx(
            (report.bleu[3] + report.meteor + report.rouge_l
             + report.cider + 50.0) / 5)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(25))
    def test_all_metrics_match_oracles(self, seed):
        rng = np.random.default_rng(9000 + seed)
        cands, refs = rand_fixture(rng)
        np.testing.assert_allclose(bleu(cands, refs), oracle_bleu(cands, refs),
                                   atol=1e-9)
        np.testing.assert_allclose(rouge_l(cands, refs),
                                   oracle_rouge_l(cands, refs), atol=1e-9)
        np.testing.assert_allclose(cider(cands, refs, reporting_scale=False),
                                   oracle_cider(cands, refs), atol=1e-9)
        np.testing.assert_allclose(meteor_lite(cands, refs),
                                   oracle_meteor_lite(cands, refs), atol=1e-9)


class TestCorpusProperties:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(77)
        cands, refs = rand_fixture(rng)
        perm = rng.permutation(len(cands))
        pc = [cands[i] for i in perm]
        pr = [refs[i] for i in perm]
        np.testing.assert_allclose(bleu(cands, refs), bleu(pc, pr), atol=1e-12)
        assert rouge_l(cands, refs) == pytest.approx(rouge_l(pc, pr), abs=1e-12)
        assert cider(cands, refs) == pytest.approx(cider(pc, pr), abs=1e-12)
        assert meteor_lite(cands, refs) == pytest.approx(meteor_lite(pc, pr),
                                                         abs=1e-12)

    def test_rouge_per_pair_locality(self):
        rng = np.random.default_rng(78)
        cands, refs = rand_fixture(rng)
        singles = [rouge_l([c], [r]) for c, r in zip(cands, refs)]
        assert rouge_l(cands, refs) == pytest.approx(np.mean(singles), abs=1e-12)
        # an unrelated extra pair leaves every original contribution intact
        extra_c, extra_r = ["house"], [["green", "field"]]
        grown = rouge_l(cands + [extra_c], refs + [extra_r])
        expect = (sum(singles) + rouge_l([extra_c], [extra_r])) / (len(cands) + 1)
        assert grown == pytest.approx(expect, abs=1e-12)

    def test_everything_maximal_on_exact_match(self):
        # candidates equal a reference: BLEU/ROUGE peak outright
        report = evaluate(EXACT_CANDS, EXACT_REFS)
        assert report.bleu == [100.0] * 4
        assert report.rouge_l == pytest.approx(100.0)
        # penalty formula keeps the exact-match METEOR variant just under 100
        assert 99.0 < report.meteor < 100.0


class TestReportFormatting:
    def test_report_has_table_and_kv_lines(self):
        report = evaluate(EXACT_CANDS, EXACT_REFS, spice=45.22)
        text = format_report(report)
        assert "BLEU-4" in text and "s_m=" in text and "S_m*" in text
        assert "not comparable" in text

    def test_two_decimal_display_full_internal_precision(self):
        report = evaluate(EXACT_CANDS, EXACT_REFS)
        text = format_report(report)
        assert f"s_m={report.s_m!r}" in text
