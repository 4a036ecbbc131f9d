import logging
import math

import numpy as np
import pytest

from micrec.channels import (
    ChannelConfig,
    build_index,
    format_retrieval_rows,
    knn_query,
    retrieve_i2i,
    retrieve_u2i,
    retrieve_u2u,
)
from micrec.numcore import DegenerateVectorError


def brute_knn(vectors, ids, query, k, exclude=()):
    """Full sort by cosine, ties to the earlier id, computed with plain loops."""
    qn = math.sqrt(sum(x * x for x in query))
    scored = []
    for pos, (i, v) in enumerate(zip(ids, vectors)):
        if i in exclude:
            continue
        vn = math.sqrt(sum(x * x for x in v))
        scored.append((-sum(a * b for a, b in zip(v, query)) / (vn * qn), pos, i))
    scored.sort()
    return [i for _, _, i in scored[:k]]


def pool_with_ties(rng, n=500, d=8):
    x = rng.normal(size=(n, d))
    x[10] = x[3]  # exact duplicate
    x[250] = 2.5 * x[3]  # same direction
    x[400] = x[77]
    return x


class TestIndex:
    def test_single(self):
        assert len(build_index(np.array([[3.0, 4.0]]))) == 1

    def test_prenormalized_unchanged(self, rng):
        x = rng.normal(size=(5, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        idx = build_index(x)
        assert np.max(np.abs(idx.matrix - x)) < 1e-15

    def test_rows_unit(self, rng):
        idx = build_index(rng.normal(size=(20, 4)) * 7)
        assert np.max(np.abs(np.linalg.norm(idx.matrix, axis=1) - 1)) < 1e-9

    def test_duplicate_id(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_index(np.ones((2, 2)), ids=["a", "a"])

    def test_zero_vector_names_id(self):
        with pytest.raises(DegenerateVectorError, match="'b'"):
            build_index({"a": [1.0, 0.0], "b": [0.0, 0.0]})

    def test_immutable(self, rng):
        idx = build_index(rng.normal(size=(3, 2)))
        with pytest.raises(ValueError):
            idx.matrix[0, 0] = 1.0


class TestKnn:
    def test_self_first(self, rng):
        x = rng.normal(size=(30, 5))
        top = knn_query(build_index(x), x[12], 1)
        assert top[0][0] == 12 and top[0][1] == pytest.approx(1.0)

    @pytest.mark.parametrize("k", [1, 10, 50])
    def test_brute_force_with_ties(self, k, rng):
        x = pool_with_ties(rng)
        ids = [f"v{j:03d}" for j in range(len(x))]
        idx = build_index(x, ids)
        for q in [x[3], x[77], rng.normal(size=8), -x[10]]:
            assert [i for i, _ in knn_query(idx, q, k)] == brute_knn(x, ids, q, k)

    def test_tie_order(self):
        x = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
        assert [i for i, _ in knn_query(build_index(x, ["a", "b", "c", "d"]), [1.0, 0.0], 3)] == ["b", "c", "d"]

    def test_k_zero(self, rng):
        with pytest.raises(ValueError):
            knn_query(build_index(rng.normal(size=(3, 2))), [1.0, 0.0], 0)

    def test_k_too_large(self, rng, caplog):
        with caplog.at_level(logging.WARNING):
            out = knn_query(build_index(rng.normal(size=(4, 2))), [1.0, 0.0], 9)
        assert len(out) == 4 and "exceeds" in caplog.text

    def test_scores_non_increasing(self, rng):
        out = knn_query(build_index(rng.normal(size=(100, 6))), rng.normal(size=6), 40)
        s = [v for _, v in out]
        assert all(a >= b for a, b in zip(s, s[1:])) and len({i for i, _ in out}) == 40


class TestU2I:
    def test_equal_vector_first(self, rng):
        items = rng.normal(size=(20, 4))
        e_u = items[7] * 0.3
        assert retrieve_u2i(e_u, build_index(items), 5)[0][0] == 7

    def test_brute_force_and_exclusion(self, rng):
        items = rng.normal(size=(60, 4))
        e_u = rng.normal(size=4)
        seen = {1, 5, 9}
        got = [i for i, _ in retrieve_u2i(e_u, build_index(items), 20, seen)]
        assert got == brute_knn(items, list(range(60)), e_u, 20, exclude=seen)


def u2u_oracle(e_u, users, items, histories, n_similar, k, query_user, seen):
    """Hand-rolled version of the neighbour-weighted scoring."""
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))  # noqa: E731
    neighbours = sorted((-cos(e_u, v), pos, u) for pos, (u, v) in enumerate(users.items()) if u != query_user)
    scores = {}
    for neg_w, _, u in neighbours[:n_similar]:
        for i in set(histories.get(u, [])):
            if i in seen:
                continue
            scores[i] = scores.get(i, 0.0) + (-neg_w) * cos(e_u, items[i])
    order = list(items)
    return [i for i, _ in sorted(scores.items(), key=lambda t: (-t[1], order.index(t[0])))[:k]]


class TestU2U:
    def test_single_neighbour(self):
        users = build_index({"a": [1.0, 0.0]}, side="user")
        items = build_index({"i1": [1.0, 0.0], "i2": [0.0, 1.0]})
        out = retrieve_u2u(np.array([1.0, 0.1]), users, items, {"a": ["i1"]}, 5, 10)
        assert [i for i, _ in out] == ["i1"]

    def test_hand_table(self):
        # query q = (1, 0); neighbours a = (1, 0) sim 1, b = (0.6, 0.8) sim 0.6.
        # item x = (1, 0) is shared, y = (0, 1) only in b's history.
        users = build_index({"q": [1.0, 0.0], "a": [1.0, 0.0], "b": [0.6, 0.8]}, side="user")
        items = build_index({"x": [1.0, 0.0], "y": [0.0, 1.0]})
        hist = {"a": ["x"], "b": ["x", "y"], "q": []}
        out = dict(retrieve_u2u(np.array([1.0, 0.0]), users, items, hist, 2, 5, query_user="q"))
        assert out["x"] == pytest.approx(1.0 * 1.0 + 0.6 * 1.0)
        assert out["y"] == pytest.approx(0.6 * 0.0)

    def test_own_items_never_returned(self, rng):
        users = build_index(rng.normal(size=(10, 3)), ids=[f"u{j}" for j in range(10)], side="user")
        items = build_index(rng.normal(size=(30, 3)))
        hist = {f"u{j}": list(rng.choice(30, 8, replace=False)) for j in range(10)}
        seen = set(hist["u0"])
        out = retrieve_u2u(users.vector("u0"), users, items, hist, 5, 30, query_user="u0", seen=seen)
        assert not seen & {i for i, _ in out}

    def test_matches_oracle(self, rng):
        uv = {f"u{j}": rng.normal(size=4) for j in range(15)}
        iv = {j: rng.normal(size=4) for j in range(25)}
        hist = {u: list(rng.choice(25, 6, replace=False)) for u in uv}
        e_u = rng.normal(size=4)
        got = [i for i, _ in retrieve_u2u(e_u, build_index(uv, side="user"), build_index(iv), hist, 4, 10,
                                          query_user="u3", seen={0, 1})]
        assert got == u2u_oracle(e_u, uv, iv, hist, 4, 10, "u3", {0, 1})

    def test_no_candidates(self, caplog):
        users = build_index({"a": [1.0, 0.0]}, side="user")
        items = build_index({"x": [1.0, 0.0]})
        with caplog.at_level(logging.WARNING):
            assert retrieve_u2u([1.0, 0.0], users, items, {"a": []}, 1, 5) == []
        assert "no candidate" in caplog.text


def i2i_oracle(e_u, history, items, m, k):
    ids = list(items)
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))  # noqa: E731
    scores = {}
    for h in dict.fromkeys(history):
        near = sorted((-cos(items[h], items[i]), ids.index(i), i) for i in ids if i not in history)[:m]
        for neg_s, _, i in near:
            scores[i] = scores.get(i, 0.0) + (-neg_s) * cos(e_u, items[i])
    return [i for i, _ in sorted(scores.items(), key=lambda t: (-t[1], ids.index(t[0])))[:k]]


class TestI2I:
    def test_forced_single(self):
        items = build_index({"h": [1.0, 1.0], "j": [1.0, 1.0]})
        e_u = np.array([1.0, 0.0])
        out = retrieve_i2i(e_u, ["h"], items, 5, 5)
        assert [i for i, _ in out] == ["j"]
        assert out[0][1] == pytest.approx(1.0 * (1 / math.sqrt(2)))

    def test_matches_oracle(self, rng):
        iv = {j: rng.normal(size=5) for j in range(20)}
        e_u = rng.normal(size=5)
        hist = [3, 7, 11]
        got = [i for i, _ in retrieve_i2i(e_u, hist, build_index(iv), 4, 10)]
        assert got == i2i_oracle(e_u, hist, iv, 4, 10)
        assert not set(hist) & set(got)

    def test_max_aggregation(self, rng):
        iv = {j: rng.normal(size=3) for j in range(12)}
        e_u = rng.normal(size=3)
        s = dict(retrieve_i2i(e_u, [0, 1], build_index(iv), 11, 12, "sum"))
        m = dict(retrieve_i2i(e_u, [0, 1], build_index(iv), 11, 12, "max"))
        assert set(s) == set(m)

    def test_empty_history(self, rng, caplog):
        with caplog.at_level(logging.WARNING):
            assert retrieve_i2i(rng.normal(size=3), [], build_index(rng.normal(size=(4, 3))), 2, 2) == []


class TestFormat:
    def test_rows(self):
        rows = format_retrieval_rows("u1", "u2i", [(5, 0.5), (2, 0.25)], lambda i: f"item{i}")
        assert rows == ["u1\tu2i\t1\titem5\t0.5", "u1\tu2i\t2\titem2\t0.25"]

    def test_config(self):
        with pytest.raises(ValueError):
            ChannelConfig(aggregation="mean")
