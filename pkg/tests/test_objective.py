import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_batch
from micrec.numcore import ParamStore, grad_check
from micrec.objective import (
    ContrastiveBatch,
    InsufficientBatchError,
    LossWeights,
    basic_on_batch,
    loss_basic,
    loss_total,
    loss_uu,
    loss_uv,
    loss_vv,
)

BLOCKS = ("user_a", "item_a", "user_b", "item_b", "user_extra", "item_extra")


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def nce_oracle(anchor, positives, weights, candidates, tau):
    """-sum_m w_m s_m/tau + log sum_c exp(s_c/tau), written out term by term."""
    num = sum(w * cos(anchor, p) / tau for p, w in zip(positives, weights))
    den = sum(math.exp(cos(anchor, c) / tau) for c in candidates)
    return -num + math.log(den)


def uv_oracle(b: ContrastiveBatch):
    n, total = b.n, 0.0
    for i in range(n):
        total += nce_oracle(b.user_a[i], [b.item_a[i]], [1.0], list(b.item_a), b.tau) / n
        total += nce_oracle(b.item_a[i], [b.user_a[i]], [1.0], list(b.user_a), b.tau) / n
    return total


def self_oracle(b: ContrastiveBatch, side):
    a, v = getattr(b, f"{side}_a"), getattr(b, f"{side}_b")
    ext = getattr(b, f"{side}_extra")
    pos, neg = getattr(b, f"{side}_pos"), getattr(b, f"{side}_neg")
    total = 0.0
    for k in range(b.n):
        p = [v[k]] + ([ext[j] for j in pos[k]] if pos else [])
        w = [1.0 / len(p)] * len(p)
        cands = list(v) + ([ext[j] for j in pos[k]] if pos else []) + ([ext[j] for j in neg[k]] if neg else [])
        total += nce_oracle(a[k], p, w, cands, b.tau) / b.n
    return total


def store_for(batch):
    s = ParamStore()
    for name in BLOCKS:
        v = getattr(batch, name)
        if v is not None:
            s.add(name, v)
    return s


def check_grads(batch, fn, **kw):
    store = store_for(batch)

    def loss(s):
        for name in s:
            setattr(batch, name, s[name])
        return fn(batch)

    return grad_check(loss, store, **kw)


class TestUV:
    def test_orthogonal_closed_form(self):
        e = np.eye(2)
        b = ContrastiveBatch(e.copy(), e.copy(), tau=1.0)
        val, _ = loss_uv(b)
        assert abs(val - 2 * -math.log(math.e / (math.e + 1))) < 1e-9

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_identical_is_2logn(self, n):
        x = np.ones((n, 3))
        val, _ = loss_uv(ContrastiveBatch(x, x.copy(), tau=0.1))
        assert abs(val - 2 * math.log(n)) < 1e-9

    def test_matches_oracle(self, rng):
        b = random_batch(rng, n=5, d=6)
        assert loss_uv(b)[0] == pytest.approx(uv_oracle(b), abs=1e-12)

    def test_insufficient(self):
        with pytest.raises(InsufficientBatchError):
            loss_uv(ContrastiveBatch(np.ones((1, 2)), np.ones((1, 2))))

    def test_grad(self, rng):
        assert check_grads(random_batch(rng), loss_uv).worst < 1e-4

    def test_grad_cross_space_positives(self, rng):
        b = random_batch(rng, extra=3)
        b.u2i_pos = [np.array([0]), np.array([1, 2]), np.array([], int), np.array([2])]
        b.i2u_pos = [np.array([1]), np.array([], int), np.array([0]), np.array([0, 1])]
        assert check_grads(b, loss_uv).worst < 1e-4

    def test_strict_denominator_can_go_negative(self):
        e = np.eye(2)
        b = ContrastiveBatch(e.copy(), e.copy(), tau=0.1, strict_paper_denominator=True)
        assert loss_uv(b)[0] < 0


class TestSelf:
    def test_closed_form(self):
        e = np.eye(2)
        b = ContrastiveBatch(e.copy(), e.copy(), e.copy(), e.copy(), tau=0.1)
        expected = -math.log(math.exp(10) / (math.exp(10) + 1))
        assert abs(loss_uu(b)[0] - expected) < 1e-12
        assert abs(loss_uu(b)[0] - 4.5398899e-05) < 1e-10

    @pytest.mark.parametrize("fn", [loss_uu, loss_vv])
    def test_identical_logn(self, fn):
        x = np.ones((4, 3))
        b = ContrastiveBatch(x, x, x, x, tau=0.1)
        assert abs(fn(b)[0] - math.log(4)) < 1e-12

    def test_both_views_convention(self):
        x = np.ones((4, 3))
        b = ContrastiveBatch(x, x, x, x, tau=0.1, view_negatives="both")
        # positive plus 2(N-1) other views
        assert abs(loss_uu(b)[0] - math.log(7)) < 1e-12

    def test_swap_symmetry(self, rng):
        b = random_batch(rng)
        swapped = ContrastiveBatch(b.item_a, b.user_a, b.item_b, b.user_b, tau=b.tau)
        assert loss_uu(b)[0] == loss_vv(swapped)[0]

    def test_mined_matches_oracle(self, rng):
        b = random_batch(rng, n=4, d=5, extra=6)
        b.user_pos = [np.array([0, 1]), np.array([2]), np.array([], int), np.array([5])]
        b.user_neg = [np.array([3]), np.array([4, 5]), np.array([0, 1, 2]), np.array([], int)]
        assert loss_uu(b)[0] == pytest.approx(self_oracle(b, "user"), abs=1e-12)

    def test_plain_matches_oracle(self, rng):
        b = random_batch(rng, n=6, d=4)
        assert loss_vv(b)[0] == pytest.approx(self_oracle(b, "item"), abs=1e-12)

    @pytest.mark.parametrize("fn", [loss_uu, loss_vv])
    @pytest.mark.parametrize("views", ["views", "both"])
    def test_grad(self, fn, views, rng):
        b = random_batch(rng, extra=4)
        b.view_negatives = views
        b.user_pos = b.item_pos = [np.array([0]), np.array([1, 3]), np.array([], int), np.array([2])]
        b.user_neg = b.item_neg = [np.array([1]), np.array([0]), np.array([2, 3]), np.array([], int)]
        assert check_grads(b, fn).worst < 1e-4

    def test_flat_softmax_gradients(self, rng):
        b = random_batch(rng, tau=1e6)
        _, g = loss_vv(b)
        assert max(np.abs(v).max() for v in g.values()) < 1e-6

    def test_missing_second_view(self, rng):
        with pytest.raises(ValueError):
            loss_uu(ContrastiveBatch(rng.normal(size=(3, 2)), rng.normal(size=(3, 2))))


class TestBasic:
    def test_zero_similarity(self):
        u = np.array([[1.0, 0.0], [0.0, 1.0]])
        v = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert loss_basic(u, v, [1, 0], tau=0.1)[0] == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_positive(self):
        u = np.array([[1.0, 0.0]])
        val, _, _ = loss_basic(u, u, [1], tau=0.1)
        assert val == pytest.approx(-math.log(1 / (1 + math.exp(-10))), rel=1e-12)
        assert val == pytest.approx(4.54e-5, rel=1e-3)

    def test_clamp(self):
        u = np.array([[1.0, 0.0]])
        val, du, _ = loss_basic(u, u, [0], tau=1e-4)
        assert val == pytest.approx(-math.log(1e-12))
        assert not du.any()

    def test_grad(self, rng):
        b = random_batch(rng)
        assert check_grads(b, basic_on_batch).worst < 1e-4

    def test_negative_pairing(self, rng):
        b = random_batch(rng, n=3)
        b.neg_perm = np.array([2, 0, 1])
        u = np.vstack([b.user_a, b.user_a])
        v = np.vstack([b.item_a, b.item_a[[2, 0, 1]]])
        assert basic_on_batch(b)[0] == loss_basic(u, v, [1, 1, 1, 0, 0, 0], b.tau)[0]


class TestTotal:
    def test_lambda_one_is_basic(self, rng):
        b = random_batch(rng)
        assert loss_total(b, LossWeights(lam=1.0)).total == basic_on_batch(b)[0]

    def test_uv_only(self, rng):
        b = random_batch(rng)
        assert loss_total(b, LossWeights(lam=0.0, w_uu=0, w_vv=0)).total == loss_uv(b)[0]

    def test_recombination(self, rng):
        b = random_batch(rng, n=6)
        w = LossWeights(0.3, 0.5, 2.0, 1.5)
        res = loss_total(b, w)
        hand = 0.3 * basic_on_batch(b)[0] + 0.7 * (0.5 * loss_uv(b)[0] + 2.0 * loss_uu(b)[0] + 1.5 * loss_vv(b)[0])
        assert abs(res.total - hand) < 1e-12

    def test_grad(self, rng):
        b = random_batch(rng, extra=3)
        b.user_pos = b.item_pos = [np.array([0]), np.array([], int), np.array([1, 2]), np.array([2])]
        b.user_neg = b.item_neg = [np.array([1]), np.array([0, 2]), np.array([], int), np.array([0])]
        b.u2i_pos = [np.array([2]), np.array([0]), np.array([], int), np.array([1])]
        rep = check_grads(b, lambda x: (lambda r: (r.total, r.grads))(loss_total(x, LossWeights())))
        assert rep.worst < 1e-4

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            LossWeights(lam=1.5)


ALL = [loss_uv, loss_uu, loss_vv, basic_on_batch]


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 3), st.sampled_from(ALL))
    def test_scale_invariant(self, seed, row, fn):
        b = random_batch(np.random.default_rng(seed))
        before = fn(b)[0]
        b.user_a = b.user_a.copy()
        b.user_a[row] *= 3
        b.item_b = b.item_b.copy()
        b.item_b[row] *= 3
        assert abs(fn(b)[0] - before) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.permutations(range(4)), st.sampled_from(ALL[:3]))
    def test_permutation_invariant(self, seed, perm, fn):
        b = random_batch(np.random.default_rng(seed))
        p = np.array(perm)
        q = ContrastiveBatch(b.user_a[p], b.item_a[p], b.user_b[p], b.item_b[p], tau=b.tau)
        assert fn(q)[0] == pytest.approx(fn(b)[0], abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded(self, seed):
        b = random_batch(np.random.default_rng(seed), tau=0.1)
        val, _ = loss_uu(b)
        # each term: -s_pos/tau + log sum exp <= log N + (max s - s_pos)/tau <= log N + 2/tau
        assert val <= math.log(4) + 2 / 0.1
        aligned = ContrastiveBatch(b.user_a, b.item_a, b.user_a.copy(), b.item_b, tau=0.1)
        assert loss_uu(aligned)[0] >= 0
