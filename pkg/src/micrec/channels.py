"""Exact cosine kNN index and the three retrieval channels.

U2I ranks the item pool by cosine to the user vector. U2U walks the
histories of the most similar training users, and I2I expands each history
item to its nearest items. Both expansion channels score a candidate by
``sum over contributors of (contributor weight) * cos(user, item)``;
``aggregation="max"`` takes the largest contribution instead of the sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .numcore import DegenerateVectorError

log = logging.getLogger(__name__)

RankedList = List[Tuple[Hashable, float]]


@dataclass
class ChannelConfig:
    n_similar: int = 50
    m_per_item: int = 20
    aggregation: str = "sum"
    exclude_seen: bool = True

    def __post_init__(self):
        if self.aggregation not in ("sum", "max"):
            raise ValueError("aggregation must be sum or max")
        if self.n_similar < 1 or self.m_per_item < 1:
            raise ValueError("n_similar and m_per_item must be >= 1")


class VectorIndex:
    """Immutable matrix of unit rows keyed by id (row order = id order)."""

    def __init__(self, ids: Sequence[Hashable], matrix: np.ndarray, side: str):
        self.ids = list(ids)
        self.side = side
        self.row: Dict[Hashable, int] = {}
        for r, i in enumerate(self.ids):
            if i in self.row:
                raise ValueError(f"duplicate id {i!r} in {side} index")
            self.row[i] = r
        m = np.array(matrix, dtype=np.float64)
        m.setflags(write=False)
        self.matrix = m

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, id_) -> np.ndarray:
        return self.matrix[self.row[id_]]


def build_index(reps, ids: Optional[Sequence[Hashable]] = None, side: str = "item") -> VectorIndex:
    """Normalize rows into an index. ``reps`` may be a mapping id -> vector."""
    if isinstance(reps, Mapping):
        ids = list(reps.keys())
        reps = np.array([reps[i] for i in ids], dtype=np.float64)
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    if ids is None:
        ids = list(range(len(reps)))
    if len(ids) == 0:
        raise ValueError("cannot build an empty index")
    if len(ids) != len(reps):
        raise ValueError("ids and reps differ in length")
    norms = np.linalg.norm(reps, axis=1)
    if np.any(norms == 0):
        raise DegenerateVectorError(f"zero vector for id {ids[int(np.flatnonzero(norms == 0)[0])]!r}")
    unit = np.where(np.isclose(norms, 1.0, rtol=0, atol=1e-15)[:, None], reps, reps / norms[:, None])
    return VectorIndex(ids, unit, side)


def _unit_vec(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).ravel()
    n = np.linalg.norm(q)
    if n == 0:
        raise DegenerateVectorError("zero query vector")
    return q / n


def _rank(scores: np.ndarray, ids: Sequence[Hashable], k: int, allowed: Optional[np.ndarray] = None) -> RankedList:
    order = np.argsort(-scores, kind="stable")
    if allowed is not None:
        order = order[allowed[order]]
    return [(ids[r], float(scores[r])) for r in order[:k]]


def knn_query(index: VectorIndex, query, k: int, exclude=()) -> RankedList:
    """Exact top-k by cosine; ties go to the earlier id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(index):
        log.warning("k=%d exceeds index size %d; returning all", k, len(index))
    scores = index.matrix @ _unit_vec(query)
    allowed = None
    if exclude:
        allowed = np.ones(len(index), dtype=bool)
        for e in exclude:
            r = index.row.get(e)
            if r is not None:
                allowed[r] = False
    return _rank(scores, index.ids, k, allowed)


def retrieve_u2i(e_u, item_index: VectorIndex, k: int, seen=()) -> RankedList:
    return knn_query(item_index, e_u, k, exclude=seen)


def _aggregate(contrib: Dict[Hashable, List[float]], how: str) -> Dict[Hashable, float]:
    if how == "max":
        return {i: max(v) for i, v in contrib.items()}
    return {i: float(np.sum(v)) for i, v in contrib.items()}


def _top(scores: Dict[Hashable, float], order: Mapping[Hashable, int], k: int) -> RankedList:
    ranked = sorted(scores.items(), key=lambda t: (-t[1], order.get(t[0], 0)))
    return ranked[:k]


def retrieve_u2u(
    e_u,
    user_index: VectorIndex,
    item_index: VectorIndex,
    histories: Mapping[Hashable, Sequence[Hashable]],
    n_similar: int,
    k: int,
    query_user=None,
    seen=(),
    aggregation: str = "sum",
) -> RankedList:
    """Items from the histories of the ``n_similar`` nearest users.

    score(i) = sum over neighbours u' with i in history(u') of
    cos(e_u, e_u') * cos(e_u, e_i).
    """
    if n_similar < 1:
        raise ValueError("n_similar must be >= 1")
    q = _unit_vec(e_u)
    excl = () if query_user is None else (query_user,)
    neighbours = knn_query(user_index, q, min(n_similar, len(user_index)), exclude=excl)
    seen = set(seen)
    contrib: Dict[Hashable, List[float]] = {}
    item_cos: Dict[Hashable, float] = {}
    for uid, w in neighbours:
        for i in dict.fromkeys(histories.get(uid, ())):
            if i in seen or i not in item_index.row:
                continue
            if i not in item_cos:
                item_cos[i] = float(item_index.vector(i) @ q)
            contrib.setdefault(i, []).append(w * item_cos[i])
    if not contrib:
        log.warning("u2u: no candidate items from %d neighbours", len(neighbours))
        return []
    return _top(_aggregate(contrib, aggregation), item_index.row, k)


def retrieve_i2i(
    e_u,
    history: Sequence[Hashable],
    item_index: VectorIndex,
    m_per_item: int,
    k: int,
    aggregation: str = "sum",
) -> RankedList:
    """Expand each history item to its ``m_per_item`` nearest non-history items.

    score(i) = sum over contributing h of cos(e_h, e_i) * cos(e_u, e_i).
    """
    hist = [h for h in dict.fromkeys(history) if h in item_index.row]
    if not hist:
        log.warning("i2i: empty history")
        return []
    q = _unit_vec(e_u)
    user_cos = item_index.matrix @ q
    contrib: Dict[Hashable, List[float]] = {}
    for h in hist:
        for i, s in knn_query(item_index, item_index.vector(h), m_per_item, exclude=hist):
            contrib.setdefault(i, []).append(s * float(user_cos[item_index.row[i]]))
    return _top(_aggregate(contrib, aggregation), item_index.row, k)


def format_retrieval_rows(user_id: str, channel: str, ranked: RankedList, id_to_token=None) -> List[str]:
    """``user_id \\t channel \\t rank \\t item_id \\t score`` rows, rank from 1."""
    rows = []
    for r, (i, s) in enumerate(ranked, start=1):
        tok = id_to_token(i) if id_to_token else i
        rows.append(f"{user_id}\t{channel}\t{r}\t{tok}\t{s:.17g}")
    return rows
