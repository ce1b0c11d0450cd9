import itertools
import math

import numpy as np
import pytest

from constlab import tensor as T
from constlab.objective import (
    combine,
    contrastive_loss,
    cross_entropy,
    ctc_batch_loss,
    ctc_loss,
    ctc_min_frames,
    l2_loss,
)
from constlab.tensor import Tensor, grad_check

from oracles import CtcEnumerator, ctc_brute_force


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def log_probs(rng, n_frames, n_sym):
    z = rng.standard_normal((n_frames, n_sym))
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class TestCrossEntropy:
    def test_matches_manual_nll_without_smoothing(self, rng):
        logits = rng.standard_normal((2, 3, 5))
        targets = np.array([[1, 4, 0], [2, 2, 3]])
        mask = np.array([[1, 1, 0], [1, 1, 1]])
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        picked = np.take_along_axis(lp, targets[..., None], -1)[..., 0]
        expected = -(picked * mask).sum() / mask.sum()
        assert cross_entropy(Tensor(logits), targets, mask).item() == pytest.approx(expected, abs=1e-12)

    def test_uniform_logits_give_log_v_for_any_smoothing(self):
        logits = Tensor(np.zeros((4, 7)))
        for eps in (0.0, 0.1, 0.5):
            assert cross_entropy(logits, np.arange(4), label_smoothing=eps).item() == pytest.approx(math.log(7))

    def test_smoothed_gradient(self, rng):
        targets = np.array([[1, 3], [0, 2]])
        mask = np.array([[1, 1], [1, 0]])
        f = lambda z: cross_entropy(z, targets, mask, label_smoothing=0.1)
        assert grad_check(f, Tensor(rng.standard_normal((2, 2, 4)))).passed

    def test_all_padding_raises(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), np.zeros((1, 2)))


class TestContrastive:
    def test_single_pair_is_exactly_zero(self, rng):
        u, v = Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((1, 4)))
        assert contrastive_loss(u, v, 0.02).item() == 0.0

    @pytest.mark.parametrize("tau", [1.0, 0.5, 0.02])
    def test_two_orthogonal_pairs_hand_value(self, tau):
        e = Tensor(np.eye(2))
        # positives cosine 1, negatives cosine 0
        expected = math.log(1.0 + math.exp(-1.0 / tau))
        assert contrastive_loss(e, e, tau).item() == pytest.approx(expected, abs=1e-12)

    def test_infinite_temperature_limit_is_log_n(self, rng):
        n = 6
        u, v = Tensor(rng.standard_normal((n, 8))), Tensor(rng.standard_normal((n, 8)))
        assert abs(contrastive_loss(u, v, 1e6).item() - math.log(n)) < 1e-3

    def test_scale_invariance(self, rng):
        u, v = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        a = contrastive_loss(Tensor(u), Tensor(v), 0.1).item()
        b = contrastive_loss(Tensor(3.0 * u), Tensor(0.2 * v), 0.1).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_extra_positive_counts_as_extra_term(self, rng):
        u, v = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        base = contrastive_loss(Tensor(u), Tensor(v), 0.5).item()
        # an extra positive identical to v_0 reproduces row 0's term exactly
        with_extra = contrastive_loss(Tensor(u), Tensor(v), 0.5, [(0, Tensor(v[0]))]).item()
        un = u / np.linalg.norm(u, axis=1, keepdims=True)
        vn = v / np.linalg.norm(v, axis=1, keepdims=True)
        s = un @ vn.T / 0.5
        row0 = -(s[0, 0] - np.log(np.exp(s[0]).sum()))
        assert with_extra == pytest.approx((3 * base + row0) / 4, abs=1e-12)

    @pytest.mark.parametrize("tau", [1.0, 0.02])
    def test_gradient(self, tau):
        # Mixed tolerance: components near 1e-7 sit at the finite-difference
        # roundoff floor, where a pure relative test is dominated by noise.
        rng = np.random.default_rng(0)
        for _ in range(5):
            u = rng.uniform(-2, 2, (8, 64))
            v = rng.uniform(-2, 2, (8, 64))
            ut, vt = Tensor(u, requires_grad=True), Tensor(v, requires_grad=True)
            contrastive_loss(ut, vt, tau).backward()
            f = lambda a: contrastive_loss(Tensor(a), Tensor(v), tau).item()
            np.testing.assert_allclose(ut.grad, numeric_grad(f, u), rtol=1e-5, atol=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            contrastive_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), 0.0)
        with pytest.raises(T.ShapeError):
            contrastive_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), 1.0)


def test_l2_loss_value_and_gradient(rng):
    u, v = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert l2_loss(Tensor(u), Tensor(v)).item() == pytest.approx(((u - v) ** 2).sum() / 3)
    assert grad_check(l2_loss, [Tensor(u), Tensor(v)]).passed


class TestCtc:
    def test_two_frame_uniform_hand_value(self):
        # T=2, symbols {a, blank}, uniform: paths "aa", "a_", "_a" give p = 3/4
        lp = Tensor(np.log(np.full((2, 2), 0.5)))
        assert ctc_loss(lp, [0]).item() == pytest.approx(-math.log(0.75), abs=1e-15)

    def test_matches_brute_force_spot_check(self, rng):
        lp = log_probs(rng, 4, 3)
        for target in ([], [0], [1, 1], [0, 1]):
            assert ctc_loss(Tensor(lp), target).item() == pytest.approx(ctc_brute_force(lp, target, 2), abs=1e-12)

    def test_full_grid_against_enumeration(self):
        rng = np.random.default_rng(0)
        n = 0
        for n_frames in range(1, 7):
            for v in range(1, 5):
                enum = CtcEnumerator(n_frames, v + 1)
                for length in range(0, 4):
                    for target in itertools.product(range(v), repeat=length):
                        if ctc_min_frames(target) > n_frames:
                            continue
                        lp = log_probs(rng, n_frames, v + 1)
                        assert abs(ctc_loss(Tensor(lp), target).item() - enum.loss(lp, target)) < 1e-10
                        n += 1
        assert n >= 200

    def test_gradient(self, rng):
        for target in ([0, 1], [1, 1], [2]):
            z = Tensor(rng.standard_normal((5, 4)))
            assert grad_check(lambda a: ctc_loss(T.log_softmax(a, -1), target), z).passed

    def test_too_few_frames(self):
        with pytest.raises(ValueError, match="need T >= 3"):
            ctc_loss(Tensor(np.log(np.full((2, 3), 1 / 3))), [0, 0])

    def test_blank_in_target(self):
        with pytest.raises(ValueError):
            ctc_loss(Tensor(np.log(np.full((3, 3), 1 / 3))), [2])

    def test_batch_is_mean_over_rows(self, rng):
        lp = np.stack([log_probs(rng, 5, 3), log_probs(rng, 5, 3)])
        got = ctc_batch_loss(Tensor(lp), [5, 3], [[0, 1], [1]]).item()
        want = (ctc_brute_force(lp[0], [0, 1], 2) + ctc_brute_force(lp[1, :3], [1], 2)) / 2
        assert got == pytest.approx(want, abs=1e-12)


class TestCombine:
    def test_weighted_total(self):
        b = combine(1.0, 2.0, 3.0, 4.0, lam=1.5)
        assert b.total == pytest.approx(12.0)
        assert b.as_dict()["l_ctr"] == 4.0

    def test_lambda_zero_drops_contrastive_term_from_graph(self):
        ctr = Tensor(np.array(5.0), requires_grad=True)
        st = Tensor(np.array(1.0), requires_grad=True)
        b = combine(st, 0.0, 0.0, ctr, lam=0.0)
        b.total_tensor.backward()
        assert ctr.grad is None and st.grad == 1.0

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_component(self, bad):
        with pytest.raises(FloatingPointError, match="l_asr"):
            combine(1.0, bad, 0.0, 0.0, 1.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            combine(1.0, 1.0, 1.0, 1.0, -0.1)
