import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constlab.data import BOS_TGT, EOS
from constlab.eval import (
    DecodeConfig,
    beam_decode,
    bleu,
    corpus_bleu,
    gap_from_reps,
    greedy_decode,
    length_normalize,
    pca,
    retrieval_from_reps,
    retrieve,
    sequence_logprob,
    strip_special,
    translate,
)

from oracles import exhaustive_best


def bigram_step_fn(table):
    """Toy model: next-token log-probs depend only on the last token."""
    table = np.asarray(table, dtype=np.float64)
    lp = table - np.log(np.exp(table).sum(axis=1, keepdims=True))

    def fn(prefixes):
        prefixes = np.asarray(prefixes)
        return lp[prefixes[:, -1]]

    return fn, lp


TOY_TABLES = [np.random.default_rng(s).standard_normal((4, 3)) * 2 for s in range(12)]
# tokens 0 and 1 are content, 2 is EOS, 3 is BOS (never emitted: its column is absent)


class TestBeam:
    @pytest.mark.parametrize("table", TOY_TABLES)
    @pytest.mark.parametrize("alpha", [0.0, 1.0])
    def test_wide_beam_equals_exhaustive_search(self, table, alpha):
        fn, lp = bigram_step_fn(table)
        cfg = DecodeConfig(beam=27, alpha=alpha, max_len=3)
        hyp = beam_decode(fn, 3, 2, cfg)
        best_score, best_seq = exhaustive_best(lambda p: lp[p[-1]], 3, 2, 3, 3, alpha)
        assert hyp.score == pytest.approx(best_score, abs=1e-12)
        assert hyp.tokens == best_seq

    def test_alpha_zero_score_is_raw_logprob(self):
        fn, _ = bigram_step_fn(TOY_TABLES[0])
        hyp = beam_decode(fn, 3, 2, DecodeConfig(beam=4, alpha=0.0, max_len=3))
        assert hyp.score == hyp.logprob

    def test_beam_one_is_greedy(self):
        for table in TOY_TABLES:
            fn, _ = bigram_step_fn(table)
            assert list(beam_decode(fn, 3, 2, DecodeConfig(beam=1, max_len=5)).tokens) == greedy_decode(fn, 3, 2, 5)

    @pytest.mark.parametrize("beam", [2, 3, 5])
    def test_wider_beam_never_scores_lower(self, beam):
        for table in TOY_TABLES:
            fn, _ = bigram_step_fn(table)
            narrow = beam_decode(fn, 3, 2, DecodeConfig(beam=1, alpha=1.0, max_len=6))
            wide = beam_decode(fn, 3, 2, DecodeConfig(beam=beam, alpha=1.0, max_len=6))
            assert wide.score >= narrow.score

    @pytest.mark.parametrize("alpha", [0.0, 0.6, 1.0])
    def test_score_is_self_consistent(self, tiny_model, small_corpus, alpha):
        ex = small_corpus.test[0]
        hyp = translate(tiny_model, ex.s, "st", DecodeConfig(beam=3, alpha=alpha, max_len=6))
        from constlab.eval import model_step_fn

        recomputed = sequence_logprob(model_step_fn(tiny_model, ex.s, "st"), BOS_TGT, hyp.tokens)
        assert hyp.score == pytest.approx(length_normalize(recomputed, len(hyp.tokens), alpha), abs=1e-9)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam=0)
        with pytest.raises(ValueError):
            DecodeConfig(alpha=-1.0)


class TestBleu:
    def test_identity(self):
        refs = [[4, 5, 6, 7, 8], [9, 10, 11, 12]]
        assert bleu(refs, refs) == pytest.approx(100.0)

    def test_brevity_case(self):
        assert bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]]) == pytest.approx(100 * math.exp(1 - 5 / 4), abs=1e-9)
        assert abs(bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]]) - 77.88) < 0.01

    def test_disjoint_is_small_but_nonzero(self):
        # test-split sized corpus; the smoothing floor shrinks with corpus length
        hyps = [[4 + (i + j) % 10 for j in range(8)] for i in range(20)]
        refs = [[20 + (i + j) % 10 for j in range(8)] for i in range(20)]
        assert 0 < bleu(hyps, refs) < 1

    def test_disjoint_single_short_sentence_value(self):
        # p_n = 1 / (2^n * count_n): (1/10 * 1/16 * 1/24 * 1/32) ** (1/4)
        expected = 100 * (1 / 10 / 16 / 24 / 32) ** 0.25
        assert bleu([[1, 2, 3, 4, 5]], [[6, 7, 8, 9, 10]]) == pytest.approx(expected)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            bleu([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.lists(st.integers(0, 5), min_size=1, max_size=8), st.lists(st.integers(0, 5), min_size=1, max_size=8)), min_size=1, max_size=6), st.randoms())
    def test_corpus_permutation_symmetry(self, pairs, rnd):
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        a = bleu([h for h, _ in pairs], [r for _, r in pairs])
        b = bleu([h for h, _ in shuffled], [r for _, r in shuffled])
        assert a == pytest.approx(b, abs=1e-9)

    def test_strip_special(self):
        assert strip_special([BOS_TGT, 5, 6, EOS, 7]) == [5, 6]

    def test_model_bleu_runs(self, tiny_model, small_corpus):
        score = corpus_bleu(tiny_model, small_corpus.test[:2], DecodeConfig(beam=2, max_len=5))
        assert 0.0 <= score <= 100.0


class TestRetrieval:
    def test_perfect_alignment(self, rng):
        v = rng.standard_normal((20, 8))
        r = retrieval_from_reps(v.copy(), v)
        assert r.top1_accuracy == 1.0 and r.correct == r.n_queries == 20

    def test_accuracy_is_exact_ratio(self, rng):
        r = retrieval_from_reps(rng.standard_normal((7, 4)), rng.standard_normal((7, 4)))
        assert r.top1_accuracy == r.correct / 7

    def test_permutation_null(self):
        n, d, seeds = 20, 16, 200
        accs = []
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            v = rng.standard_normal((n, d))
            u = v[rng.permutation(n)] + 0.01 * rng.standard_normal((n, d))
            accs.append(retrieval_from_reps(u, v).top1_accuracy)
        # a random permutation has 1 fixed point on average; variance of the count is 1
        sigma = 1.0 / n / math.sqrt(seeds)
        assert abs(np.mean(accs) - 1.0 / n) < 3 * sigma

    def test_positive_rescaling_invariance(self, rng):
        u, v = rng.standard_normal((10, 6)), rng.standard_normal((10, 6))
        a = retrieval_from_reps(u, v)
        b = retrieval_from_reps(u * rng.uniform(0.1, 10, (10, 1)), v * 3.0)
        assert a.correct == b.correct
        assert a.margin == pytest.approx(b.margin, abs=1e-12)

    def test_zero_norm_names_example(self, rng):
        u = rng.standard_normal((3, 4))
        u[2] = 0
        with pytest.raises(ValueError, match="example 2"):
            retrieval_from_reps(u, rng.standard_normal((3, 4)))

    def test_untrained_model_near_chance(self, tiny_model, small_corpus):
        r = retrieve(tiny_model, small_corpus.train, "low")
        assert r.n_queries == len(small_corpus.train)
        assert r.top1_accuracy < 0.3


class TestGap:
    def test_identical_sets(self, rng):
        u = rng.standard_normal((12, 5))
        g = gap_from_reps(u, u.copy())
        assert g.paired_mean == pytest.approx(1.0)
        np.testing.assert_allclose(g.coords_speech, g.coords_text, atol=1e-12)

    def test_random_cosines_concentrate(self, rng):
        g = gap_from_reps(rng.standard_normal((256, 64)), rng.standard_normal((256, 64)))
        assert abs(g.paired_mean) < 0.1

    def test_too_few(self, rng):
        with pytest.raises(ValueError):
            gap_from_reps(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)))

    def test_pca_nesting(self, rng):
        pts = rng.standard_normal((40, 6)) @ rng.standard_normal((6, 6))
        errs = []
        for k in (1, 2):
            coords, comps, mean = pca(pts, k)
            errs.append(((pts - mean - coords @ comps) ** 2).sum())
        assert errs[1] <= errs[0]
