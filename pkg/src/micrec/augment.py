"""View perturbation (field masking, embedded-feature dropout) and
representation-space mining (kNN positives, k-means++ hard negatives,
cross-side user/item neighbours)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import MASK, PAD
from .encoder import ItemViews, UserViews

log = logging.getLogger(__name__)


@dataclass
class PerturbConfig:
    field_mask_prob: float = 0.15
    # None means "all fields but one"
    max_masked_fields: Optional[int] = None
    feature_dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.field_mask_prob <= 1:
            raise ValueError("field_mask_prob must lie in [0, 1]")
        if not 0 <= self.feature_dropout_rate < 1:
            raise ValueError("feature_dropout_rate must lie in [0, 1)")

    def cap(self, total_fields: int) -> int:
        cap = total_fields - 1 if self.max_masked_fields is None else self.max_masked_fields
        if cap >= total_fields:
            raise ValueError(f"max_masked_fields={cap} would allow masking all {total_fields} fields")
        return max(cap, 0)


@dataclass
class MiningConfig:
    k_neighbors: int = 5
    num_clusters: int = 20
    hard_negatives_per_anchor: int = 5
    refresh_every: int = 1000
    kmeans_iters: int = 50

    def __post_init__(self):
        if self.k_neighbors < 0:
            raise ValueError("k_neighbors must be non-negative")
        if self.hard_negatives_per_anchor > 0 and self.num_clusters < 2:
            raise ValueError("hard negatives need at least two clusters")


@dataclass
class SupportSet:
    """Per-anchor mined positives and hard negatives (pool indices)."""

    positives: List[np.ndarray]
    negatives: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    def check_disjoint(self) -> bool:
        for a, (p, n) in enumerate(zip(self.positives, self.negatives)):
            if np.intersect1d(p, n).size or a in p:
                return False
        return True


# ---------------------------------------------------------------------------
# perturbation


def _cap_fields(field_masked: np.ndarray, cap: int, rng: np.random.Generator, forced=None) -> np.ndarray:
    """Keep at most ``cap`` masked fields per row, chosen uniformly.

    ``forced`` marks fields that carry no information to begin with; they
    always count as masked and use up the cap first.
    """
    scores = rng.random(field_masked.shape)
    if forced is not None:
        field_masked = field_masked | forced
        scores[forced] = -np.inf
    scores[~field_masked] = np.inf
    rank = np.argsort(np.argsort(scores, axis=1, kind="stable"), axis=1, kind="stable")
    return field_masked & (rank < cap)


def _mask_sequence(seq: np.ndarray, p: float, rng: np.random.Generator):
    """Per-token masks over informative tokens (not PAD or MASK).

    Returns (token mask, field fully masked, field uninformative already).
    """
    real = seq > MASK
    tok = (rng.random(seq.shape) < p) & real
    empty = ~real.any(axis=1)
    full = (tok.sum(axis=1) == real.sum(axis=1)) & ~empty
    return tok, full, empty


def mask_user_views(views: UserViews, cfg: PerturbConfig, rng: np.random.Generator) -> UserViews:
    """Mask (id, gender, age, history) fields; history is masked per token.

    The history counts as a masked field only when every token is masked.
    Fields that arrive uninformative (MASK id, no real history tokens) count
    toward the cap, so some informative field always survives.
    """
    p = cfg.field_mask_prob
    scalar = rng.random((len(views), 3)) < p
    tok, full, empty = _mask_sequence(views.history, p, rng)
    fields = np.concatenate([scalar, full[:, None]], axis=1)
    forced = np.stack([views.uid == MASK, views.gender == MASK, views.age == MASK, empty], axis=1)
    kept = _cap_fields(fields, cfg.cap(4), rng, forced)
    tok = np.where((fields[:, 3] & ~kept[:, 3])[:, None], False, tok)
    out = UserViews(views.uid.copy(), views.gender.copy(), views.age.copy(), views.history.copy())
    for col, arr in enumerate((out.uid, out.gender, out.age)):
        arr[kept[:, col]] = MASK
    out.history[tok] = MASK
    return out


def mask_item_views(views: ItemViews, cfg: PerturbConfig, rng: np.random.Generator) -> ItemViews:
    """Mask (id, keywords) fields; keywords are masked per token."""
    p = cfg.field_mask_prob
    scalar = rng.random((len(views), 1)) < p
    tok, full, empty = _mask_sequence(views.keywords, p, rng)
    fields = np.concatenate([scalar, full[:, None]], axis=1)
    forced = np.stack([views.iid == MASK, empty], axis=1)
    kept = _cap_fields(fields, cfg.cap(2), rng, forced)
    tok = np.where((fields[:, 1] & ~kept[:, 1])[:, None], False, tok)
    out = ItemViews(views.iid.copy(), views.keywords.copy())
    out.iid[kept[:, 0]] = MASK
    out.keywords[tok] = MASK
    return out


def mask_fields(views, cfg: PerturbConfig, rng: np.random.Generator):
    if isinstance(views, UserViews):
        return mask_user_views(views, cfg, rng)
    if isinstance(views, ItemViews):
        return mask_item_views(views, cfg, rng)
    raise TypeError(f"cannot mask {type(views).__name__}")


def feature_dropout(x: np.ndarray, rate: float, rng: np.random.Generator, return_mask: bool = False):
    """Inverted dropout: zero with prob ``rate``, scale survivors by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = x * mask
    return (out, mask) if return_mask else out


# ---------------------------------------------------------------------------
# mining


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k by descending score, ties to the lower column index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def mine_knn_positives(
    anchor_reps: np.ndarray,
    pool_reps: np.ndarray,
    k: int,
    anchor_pool_index: Optional[Sequence[int]] = None,
) -> List[np.ndarray]:
    """Cosine top-k of each anchor within the pool, excluding the anchor itself.

    ``anchor_pool_index[a]`` is anchor a's own row in the pool (or -1).
    """
    n_pool = pool_reps.shape[0]
    if n_pool == 0:
        raise ValueError("empty pool")
    if anchor_pool_index is None:
        anchor_pool_index = np.full(len(anchor_reps), -1)
    anchor_pool_index = np.asarray(anchor_pool_index)
    avail = n_pool - (1 if np.any(anchor_pool_index >= 0) else 0)
    if k >= n_pool:
        log.warning("k_neighbors=%d >= pool size %d; clamping", k, n_pool)
        k = avail
    if k <= 0:
        return [np.empty(0, dtype=np.int64) for _ in range(len(anchor_reps))]
    scores = _unit(anchor_reps) @ _unit(pool_reps).T
    rows = np.flatnonzero(anchor_pool_index >= 0)
    scores[rows, anchor_pool_index[rows]] = -np.inf
    top = top_k_indices(scores, k)
    return [top[a][np.isfinite(scores[a, top[a]])] for a in range(len(top))]


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia_history: List[float]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeanspp_cluster(reps: np.ndarray, num_clusters: int, max_iters: int = 50, seed=0) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations on unit-normalized rows.

    An empty cluster is re-seeded at the point farthest from its current
    centroid.
    """
    x = _unit(np.asarray(reps, dtype=np.float64))
    n = x.shape[0]
    if not 1 <= num_clusters <= n:
        raise ValueError(f"num_clusters={num_clusters} must lie in [1, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, num_clusters):
        total = d2.sum()
        if total > 0:
            j = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            j = int(rest[rng.integers(rest.size)])
        chosen.append(j)
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(1))
    centroids = x[chosen].copy()

    assignment = None
    history: List[float] = []
    for _ in range(max(max_iters, 1)):
        dist = _sq_dists(x, centroids)
        new = dist.argmin(axis=1)
        inertia = float(dist[np.arange(n), new].sum())
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        history.append(inertia)
        for c in range(num_clusters):
            members = assignment == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
        for c in range(num_clusters):
            if not (assignment == c).any():
                own = ((x - centroids[assignment]) ** 2).sum(1)
                far = int(own.argmax())
                centroids[c] = x[far]
                assignment[far] = c
    dist = _sq_dists(x, centroids)
    final = float(dist[np.arange(n), assignment].sum())
    if not history or final < history[-1]:
        history.append(final)
    return KMeansResult(assignment, centroids, history)


def mine_hard_negatives(
    anchor: int,
    assignment: np.ndarray,
    n: int,
    rng: np.random.Generator,
    exclude: Sequence[int] = (),
) -> np.ndarray:
    """Uniform draw without replacement from points outside the anchor's cluster."""
    eligible = np.flatnonzero(assignment != assignment[anchor])
    if len(exclude):
        eligible = np.setdiff1d(eligible, exclude)
    if eligible.size == 0:
        log.warning("anchor %d: no points outside its cluster", anchor)
        return np.empty(0, dtype=np.int64)
    if eligible.size < n:
        log.warning("anchor %d: only %d out-of-cluster points for %d requested", anchor, eligible.size, n)
        n = eligible.size
    return np.sort(rng.choice(eligible, size=n, replace=False))


def mine_cross_space(user_joint: np.ndarray, item_joint: np.ndarray, k: int) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Cosine kNN across sides: (items per user, users per item)."""
    if len(user_joint) == 0 or len(item_joint) == 0:
        log.warning("cross-space mining with an empty side")
        return [np.empty(0, dtype=np.int64)] * len(user_joint), [np.empty(0, dtype=np.int64)] * len(item_joint)
    if k <= 0:
        return (
            [np.empty(0, dtype=np.int64) for _ in range(len(user_joint))],
            [np.empty(0, dtype=np.int64) for _ in range(len(item_joint))],
        )
    s = _unit(user_joint) @ _unit(item_joint).T
    u2i = top_k_indices(s, min(k, s.shape[1]))
    i2u = top_k_indices(s.T, min(k, s.shape[0]))
    return list(u2i), list(i2u)


def mine_support(
    reps: np.ndarray,
    cfg: MiningConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> Tuple[SupportSet, KMeansResult]:
    """kNN positives and cross-cluster hard negatives for every pool member."""
    n = reps.shape[0]
    pos = mine_knn_positives(reps, reps, min(cfg.k_neighbors, max(n - 1, 0)), np.arange(n))
    negs: List[np.ndarray] = []
    km = None
    if cfg.hard_negatives_per_anchor > 0 and n >= 2:
        km = kmeanspp_cluster(reps, min(cfg.num_clusters, n), cfg.kmeans_iters, rng)
        for a in range(n):
            negs.append(mine_hard_negatives(a, km.assignment, cfg.hard_negatives_per_anchor, rng, exclude=pos[a]))
    else:
        negs = [np.empty(0, dtype=np.int64) for _ in range(n)]
    return SupportSet(pos, negs, step), km
