"""Contrastive (user-item, user-user, item-item) and logistic losses with
analytic gradients w.r.t. the representation blocks.

All contrastive terms share one kernel: a multi-positive softmax over
cosine similarities scaled by ``1/tau``. By default the denominator
includes the positive; ``strict_paper_denominator`` drops the in-batch
positive from the denominator instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numcore import normalize_rows, normalize_rows_backward


class InsufficientBatchError(ValueError):
    pass


Grads = Dict[str, np.ndarray]


@dataclass
class LossWeights:
    lam: float = 0.7
    w_uv: float = 1.0
    w_uu: float = 1.0
    w_vv: float = 1.0

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if min(self.w_uv, self.w_uu, self.w_vv) < 0:
            raise ValueError("channel weights must be non-negative")


@dataclass
class ContrastiveBatch:
    """Representation blocks for one step.

    ``*_extra`` hold representations of mined pool members; the per-anchor
    lists index rows of those blocks.
    """

    user_a: np.ndarray
    item_a: np.ndarray
    user_b: Optional[np.ndarray] = None
    item_b: Optional[np.ndarray] = None
    tau: float = 0.1
    user_extra: Optional[np.ndarray] = None
    item_extra: Optional[np.ndarray] = None
    user_pos: Optional[List[np.ndarray]] = None
    user_neg: Optional[List[np.ndarray]] = None
    item_pos: Optional[List[np.ndarray]] = None
    item_neg: Optional[List[np.ndarray]] = None
    u2i_pos: Optional[List[np.ndarray]] = None
    i2u_pos: Optional[List[np.ndarray]] = None
    # basic-loss negative pairing: user i with item neg_perm[i]
    neg_perm: Optional[np.ndarray] = None
    strict_paper_denominator: bool = False
    # "views": candidates are the N second views; "both": 2(N-1) other views
    view_negatives: str = "views"

    @property
    def n(self) -> int:
        return self.user_a.shape[0]


def _zeros_like_blocks(batch: ContrastiveBatch) -> Grads:
    out = {}
    for name in ("user_a", "item_a", "user_b", "item_b", "user_extra", "item_extra"):
        v = getattr(batch, name)
        if v is not None:
            out[name] = np.zeros_like(v)
    return out


def multi_positive_nce(
    anchors: np.ndarray,
    cands: np.ndarray,
    pos_w: np.ndarray,
    cand_mask: np.ndarray,
    tau: float,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """mean_i [ -sum_m w_im s_im/tau + log sum_{m in cand_i} exp(s_im/tau) ].

    ``s`` is cosine similarity; rows of ``pos_w`` sum to 1. Returns
    (loss, d_anchors, d_cands).
    """
    za, na = normalize_rows(anchors)
    zc, nc = normalize_rows(cands)
    logits = (za @ zc.T) / tau
    masked = np.where(cand_mask, logits, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - mx)
    z = e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(z[:, 0])
    n = anchors.shape[0]
    loss = float(np.mean(lse - (pos_w * logits).sum(axis=1)))
    d_logits = (e / z - pos_w) / (n * tau)
    d_za = d_logits @ zc
    d_zc = d_logits.T @ za
    return loss, normalize_rows_backward(za, na, d_za), normalize_rows_backward(zc, nc, d_zc)


def _layout(
    n: int,
    n_extra: int,
    pos: Optional[Sequence[np.ndarray]],
    neg: Optional[Sequence[np.ndarray]],
    strict: bool,
    self_block: bool = False,
):
    """Weights/mask over candidates [in-batch (n) | self-views (n, optional) | extra]."""
    width = n * (2 if self_block else 1) + n_extra
    off = n * (2 if self_block else 1)
    pos_w = np.zeros((n, width))
    mask = np.zeros((n, width), dtype=bool)
    mask[:, :n] = True
    if strict:
        mask[np.arange(n), np.arange(n)] = False
    if self_block:
        mask[:, n : 2 * n] = ~np.eye(n, dtype=bool)
    for i in range(n):
        p = np.asarray(pos[i], dtype=np.int64) if pos is not None else np.empty(0, np.int64)
        w = 1.0 / (1 + p.size)
        pos_w[i, i] = w
        if p.size:
            np.add.at(pos_w[i], off + p, w)
            if not strict:
                mask[i, off + p] = True
        if neg is not None and len(neg[i]):
            mask[i, off + np.asarray(neg[i], dtype=np.int64)] = True
    return pos_w, mask


def _check(batch: ContrastiveBatch):
    if batch.n < 2:
        raise InsufficientBatchError(f"contrastive losses need N >= 2, got {batch.n}")


def loss_uv(batch: ContrastiveBatch) -> Tuple[float, Grads]:
    """Two-direction user<->item InfoNCE on the first views, averaged over pairs."""
    _check(batch)
    n = batch.n
    grads = _zeros_like_blocks(batch)
    total = 0.0
    for anc, cand, extra, pos in (
        ("user_a", "item_a", "item_extra", batch.u2i_pos),
        ("item_a", "user_a", "user_extra", batch.i2u_pos),
    ):
        ext = getattr(batch, extra) if pos is not None else None
        n_extra = 0 if ext is None else ext.shape[0]
        cands = getattr(batch, cand) if not n_extra else np.vstack([getattr(batch, cand), ext])
        pos_w, mask = _layout(n, n_extra, pos if n_extra else None, None, batch.strict_paper_denominator)
        val, da, dc = multi_positive_nce(getattr(batch, anc), cands, pos_w, mask, batch.tau)
        total += val
        grads[anc] += da
        grads[cand] += dc[:n]
        if n_extra:
            grads[extra] += dc[n:]
    return total, grads


def _loss_self(batch: ContrastiveBatch, side: str) -> Tuple[float, Grads]:
    _check(batch)
    n = batch.n
    a, b = getattr(batch, f"{side}_a"), getattr(batch, f"{side}_b")
    if b is None:
        raise ValueError(f"{side}-{side} loss needs a second {side} view")
    ext = getattr(batch, f"{side}_extra")
    pos, neg = getattr(batch, f"{side}_pos"), getattr(batch, f"{side}_neg")
    if ext is None:
        pos = neg = None
    n_extra = 0 if ext is None else ext.shape[0]
    both = batch.view_negatives == "both"
    blocks = [b] + ([a] if both else []) + ([ext] if n_extra else [])
    pos_w, mask = _layout(n, n_extra, pos, neg, batch.strict_paper_denominator, self_block=both)
    val, da, dc = multi_positive_nce(a, np.vstack(blocks), pos_w, mask, batch.tau)
    grads = _zeros_like_blocks(batch)
    grads[f"{side}_a"] += da
    grads[f"{side}_b"] += dc[:n]
    off = n
    if both:
        grads[f"{side}_a"] += dc[n : 2 * n]
        off = 2 * n
    if n_extra:
        grads[f"{side}_extra"] += dc[off:]
    return val, grads


def loss_uu(batch: ContrastiveBatch) -> Tuple[float, Grads]:
    """Anchor: first user view; positive: its second view (plus mined kNN users)."""
    return _loss_self(batch, "user")


def loss_vv(batch: ContrastiveBatch) -> Tuple[float, Grads]:
    return _loss_self(batch, "item")


def loss_basic(user_reps: np.ndarray, item_reps: np.ndarray, labels, tau: float = 0.1):
    """Binary cross-entropy on sigmoid(cos/tau) for aligned (user, item, label) rows.

    Returns (loss, d_user_reps, d_item_reps).
    """
    y = np.asarray(labels, dtype=np.float64)
    zu, nu = normalize_rows(user_reps)
    zv, nv = normalize_rows(item_reps)
    x = np.sum(zu * zv, axis=1) / tau
    y_hat = 1.0 / (1.0 + np.exp(-x))
    lo, hi = 1e-12, 1.0 - 1e-12
    clipped = np.clip(y_hat, lo, hi)
    n = len(y)
    loss = float(-np.mean(y * np.log(clipped) + (1 - y) * np.log(1 - clipped)))
    active = (y_hat > lo) & (y_hat < hi)
    d_x = np.where(active, (y_hat - y) / n, 0.0) / tau
    d_zu = d_x[:, None] * zv
    d_zv = d_x[:, None] * zu
    return loss, normalize_rows_backward(zu, nu, d_zu), normalize_rows_backward(zv, nv, d_zv)


def basic_on_batch(batch: ContrastiveBatch) -> Tuple[float, Grads]:
    """Logistic loss with observed pairs as y=1 and ``neg_perm`` pairings as y=0."""
    n = batch.n
    rows_u = np.arange(n)
    rows_v = np.arange(n)
    labels = np.ones(n)
    if batch.neg_perm is not None:
        rows_u = np.concatenate([rows_u, np.arange(n)])
        rows_v = np.concatenate([rows_v, np.asarray(batch.neg_perm)])
        labels = np.concatenate([labels, np.zeros(n)])
    val, du, dv = loss_basic(batch.user_a[rows_u], batch.item_a[rows_v], labels, batch.tau)
    grads = _zeros_like_blocks(batch)
    np.add.at(grads["user_a"], rows_u, du)
    np.add.at(grads["item_a"], rows_v, dv)
    return val, grads


@dataclass
class LossResult:
    total: float
    grads: Grads
    components: Dict[str, float] = field(default_factory=dict)


def loss_total(batch: ContrastiveBatch, weights: LossWeights) -> LossResult:
    """lam * L_basic + (1 - lam) * (w_uv L_uv + w_vv L_vv + w_uu L_uu).

    Terms with zero effective weight are skipped entirely.
    """
    grads = _zeros_like_blocks(batch)
    comps: Dict[str, float] = {}
    total = 0.0
    terms = (
        ("basic", weights.lam, basic_on_batch),
        ("uv", (1 - weights.lam) * weights.w_uv, loss_uv),
        ("vv", (1 - weights.lam) * weights.w_vv, loss_vv),
        ("uu", (1 - weights.lam) * weights.w_uu, loss_uu),
    )
    for name, coef, fn in terms:
        if coef == 0:
            continue
        val, g = fn(batch)
        comps[name] = val
        total += coef * val
        for k, v in g.items():
            grads[k] += coef * v
    return LossResult(total, grads, comps)
