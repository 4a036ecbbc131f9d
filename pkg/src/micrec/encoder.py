"""Two-tower encoders over embedded user/item fields.

User tower: MLP(concat(user-id, gender, age, mean(history item embeddings)))
Item tower: MLP(concat(item-id, mean(keyword embeddings)))

Towers use relu hidden layers and an identity output layer. A separate
joint projection (affine + tanh + L2 norm) maps both sides into a common
space used for cross-side neighbour mining.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import MASK, NONE_TOKEN, PAD, Corpus
from .numcore import (
    DegenerateVectorError,
    ParamStore,
    cosine_sim,
    init_xavier,
    mlp_layer_backward,
    mlp_layer_forward,
    normalize_rows,
    normalize_rows_backward,
)


class EmbeddingLookupError(IndexError):
    """Embedding index out of range."""


@dataclass
class EncoderConfig:
    dim: int = 128
    hidden_sizes: Tuple[int, ...] = (256, 128)
    history_pooling: str = "mean"
    share_item_table: bool = True
    max_history: int = 50

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.dim <= 0 or not self.hidden_sizes or min(self.hidden_sizes) <= 0:
            raise ValueError("dim and hidden sizes must be positive and non-empty")
        if self.history_pooling != "mean":
            raise ValueError("only mean history pooling is implemented")


# ---------------------------------------------------------------------------
# embedding primitives


def embed_lookup(table: np.ndarray, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])].ravel()[0]
        raise EmbeddingLookupError(f"index {int(bad)} out of range for table of size {table.shape[0]}")
    return table[idx]


def embed_backward(grad_table: np.ndarray, indices, upstream: np.ndarray) -> None:
    """Scatter-add ``upstream`` rows into ``grad_table``; PAD never receives gradient."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    np.add.at(grad_table, idx, upstream.reshape(idx.size, -1))
    grad_table[PAD] = 0.0


# ---------------------------------------------------------------------------
# feature views


@dataclass
class UserViews:
    uid: np.ndarray  # (B,)
    gender: np.ndarray  # (B,)
    age: np.ndarray  # (B,)
    history: np.ndarray  # (B, L), PAD-padded

    def __len__(self):
        return len(self.uid)

    def take(self, rows) -> "UserViews":
        return UserViews(self.uid[rows], self.gender[rows], self.age[rows], self.history[rows])


@dataclass
class ItemViews:
    iid: np.ndarray  # (B,)
    keywords: np.ndarray  # (B, K), PAD-padded

    def __len__(self):
        return len(self.iid)

    def take(self, rows) -> "ItemViews":
        return ItemViews(self.iid[rows], self.keywords[rows])


def _pad(seqs: Sequence[Sequence[int]], max_len: Optional[int] = None) -> np.ndarray:
    seqs = [list(s)[-max_len:] if max_len else list(s) for s in seqs]
    width = max((len(s) for s in seqs), default=1) or 1
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out


class Features:
    """Index lookups from a corpus to encoder inputs."""

    def __init__(self, corpus: Corpus, max_history: int = 50):
        self.corpus = corpus
        self.max_history = max_history
        self.user_row = {u.user_id: r for r, u in enumerate(corpus.users)}
        self.user_gender = {
            u.user_id: corpus.gender_vocab.get(u.gender or NONE_TOKEN) for u in corpus.users
        }
        self.user_age = {u.user_id: corpus.age_vocab.get(u.age or NONE_TOKEN) for u in corpus.users}
        n_items = len(corpus.item_vocab)
        self.item_keywords: List[List[int]] = [[MASK] for _ in range(n_items)]
        for it in corpus.items:
            kws = [corpus.keyword_vocab.get(k) for k in it.keywords]
            self.item_keywords[corpus.item_vocab.index(it.item_id)] = kws or [MASK]

    @property
    def num_items(self) -> int:
        return len(self.corpus.item_vocab)

    def all_item_indices(self) -> np.ndarray:
        return np.arange(2, self.num_items, dtype=np.int64)

    def user_views(self, user_ids: Sequence[str], histories: Sequence[Sequence[int]]) -> UserViews:
        uv = self.corpus.user_vocab
        return UserViews(
            np.array([uv.get(u) for u in user_ids], dtype=np.int64),
            np.array([self.user_gender.get(u, MASK) for u in user_ids], dtype=np.int64),
            np.array([self.user_age.get(u, MASK) for u in user_ids], dtype=np.int64),
            _pad(histories, self.max_history),
        )

    def item_views(self, item_indices) -> ItemViews:
        idx = np.asarray(item_indices, dtype=np.int64)
        return ItemViews(idx, _pad([self.item_keywords[i] for i in idx]))


# ---------------------------------------------------------------------------
# towers


@dataclass
class TowerCache:
    views: object
    pooled_count: np.ndarray
    dropout_mask: Optional[np.ndarray]
    layers: list


@dataclass
class ProjCache:
    side: str
    layer: object
    z: np.ndarray
    norms: np.ndarray


class TwoTowerEncoder:
    """Parameters and forward/backward passes of both towers."""

    def __init__(
        self,
        cfg: EncoderConfig,
        n_users: int,
        n_items: int,
        n_genders: int,
        n_ages: int,
        n_keywords: int,
        seed: int = 0,
    ):
        self.cfg = cfg
        self.vocab_sizes = dict(
            user=n_users, item=n_items, gender=n_genders, age=n_ages, keyword=n_keywords
        )
        rng = np.random.default_rng(seed)
        d = cfg.dim
        store = ParamStore()
        for name in ("user", "item", "gender", "age", "keyword"):
            table = init_xavier((self.vocab_sizes[name], d), rng)
            table[PAD] = 0.0
            store.add(f"emb/{name}", table, frozen_rows=(PAD,))
        if not cfg.share_item_table:
            table = init_xavier((n_items, d), rng)
            table[PAD] = 0.0
            store.add("emb/item_target", table, frozen_rows=(PAD,))
        for tower, width in (("user_tower", 4 * d), ("item_tower", 2 * d)):
            sizes = (width,) + cfg.hidden_sizes + (d,)
            for k in range(len(sizes) - 1):
                store.add(f"{tower}/w{k}", init_xavier((sizes[k], sizes[k + 1]), rng))
                store.add(f"{tower}/b{k}", np.zeros((1, sizes[k + 1])))
        for side in ("user", "item"):
            store.add(f"joint/{side}_w", init_xavier((d, d), rng))
            store.add(f"joint/{side}_b", np.zeros((1, d)))
        self.store = store

    @classmethod
    def for_corpus(cls, cfg: EncoderConfig, corpus: Corpus, seed: int = 0) -> "TwoTowerEncoder":
        return cls(
            cfg,
            len(corpus.user_vocab),
            len(corpus.item_vocab),
            len(corpus.gender_vocab),
            len(corpus.age_vocab),
            len(corpus.keyword_vocab),
            seed,
        )

    @property
    def n_layers(self) -> int:
        return len(self.cfg.hidden_sizes) + 1

    @property
    def item_target_table(self) -> str:
        return "emb/item" if self.cfg.share_item_table else "emb/item_target"

    # -- shared MLP ------------------------------------------------------

    def _mlp(self, tower: str, x: np.ndarray):
        caches = []
        for k in range(self.n_layers):
            act = "relu" if k < self.n_layers - 1 else "identity"
            x, c = mlp_layer_forward(x, self.store[f"{tower}/w{k}"], self.store[f"{tower}/b{k}"], act)
            caches.append(c)
        return x, caches

    def _mlp_backward(self, tower: str, caches, d_out: np.ndarray) -> np.ndarray:
        for k in reversed(range(self.n_layers)):
            d_out, dw, db = mlp_layer_backward(caches[k], d_out)
            self.store.grad(f"{tower}/w{k}")[...] += dw
            self.store.grad(f"{tower}/b{k}")[...] += db
        return d_out

    @staticmethod
    def _mean_pool(table: np.ndarray, seq: np.ndarray):
        mask = seq != PAD
        count = mask.sum(axis=1)
        if np.any(count == 0):
            raise DegenerateVectorError(f"all-PAD sequence in row {int(np.flatnonzero(count == 0)[0])}")
        emb = embed_lookup(table, seq) * mask[..., None]
        return emb.sum(axis=1) / count[:, None], count

    @staticmethod
    def _pool_backward(grad_table, seq, count, d_pooled):
        mask = (seq != PAD)[..., None]
        up = np.broadcast_to((d_pooled / count[:, None])[:, None, :], mask.shape[:2] + d_pooled.shape[1:])
        embed_backward(grad_table, seq, up * mask)

    @staticmethod
    def _apply_dropout(x, rate, rng, mask):
        if mask is None and rate > 0:
            if rng is None:
                raise ValueError("dropout needs a random generator")
            mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return (x * mask if mask is not None else x), mask

    # -- user side -------------------------------------------------------

    def encode_users(self, views: UserViews, dropout_rate: float = 0.0, rng=None, dropout_mask=None):
        """Returns (reps (B, d), cache)."""
        s = self.store
        pooled, count = self._mean_pool(s["emb/item"], views.history)
        x = np.concatenate(
            [
                embed_lookup(s["emb/user"], views.uid),
                embed_lookup(s["emb/gender"], views.gender),
                embed_lookup(s["emb/age"], views.age),
                pooled,
            ],
            axis=1,
        )
        x, mask = self._apply_dropout(x, dropout_rate, rng, dropout_mask)
        out, layers = self._mlp("user_tower", x)
        return out, TowerCache(views, count, mask, layers)

    def backward_users(self, cache: TowerCache, d_reps: np.ndarray) -> None:
        dx = self._mlp_backward("user_tower", cache.layers, d_reps)
        if cache.dropout_mask is not None:
            dx = dx * cache.dropout_mask
        d = self.cfg.dim
        v = cache.views
        s = self.store
        embed_backward(s.grad("emb/user"), v.uid, dx[:, :d])
        embed_backward(s.grad("emb/gender"), v.gender, dx[:, d : 2 * d])
        embed_backward(s.grad("emb/age"), v.age, dx[:, 2 * d : 3 * d])
        self._pool_backward(s.grad("emb/item"), v.history, cache.pooled_count, dx[:, 3 * d :])

    # -- item side -------------------------------------------------------

    def encode_items(self, views: ItemViews, dropout_rate: float = 0.0, rng=None, dropout_mask=None):
        s = self.store
        pooled, count = self._mean_pool(s["emb/keyword"], views.keywords)
        x = np.concatenate([embed_lookup(s[self.item_target_table], views.iid), pooled], axis=1)
        x, mask = self._apply_dropout(x, dropout_rate, rng, dropout_mask)
        out, layers = self._mlp("item_tower", x)
        return out, TowerCache(views, count, mask, layers)

    def backward_items(self, cache: TowerCache, d_reps: np.ndarray) -> None:
        dx = self._mlp_backward("item_tower", cache.layers, d_reps)
        if cache.dropout_mask is not None:
            dx = dx * cache.dropout_mask
        d = self.cfg.dim
        s = self.store
        embed_backward(s.grad(self.item_target_table), cache.views.iid, dx[:, :d])
        self._pool_backward(s.grad("emb/keyword"), cache.views.keywords, cache.pooled_count, dx[:, d:])

    # -- joint space -----------------------------------------------------

    def project_joint(self, reps: np.ndarray, side: str):
        """tanh(reps @ W + b), normalized to unit rows. Returns (out, cache)."""
        if side not in ("user", "item"):
            raise ValueError(f"side must be user or item, got {side!r}")
        a, layer = mlp_layer_forward(reps, self.store[f"joint/{side}_w"], self.store[f"joint/{side}_b"], "tanh")
        z, norms = normalize_rows(a)
        return z, ProjCache(side, layer, z, norms)

    def backward_joint(self, cache: ProjCache, d_out: np.ndarray) -> np.ndarray:
        da = normalize_rows_backward(cache.z, cache.norms, d_out)
        dx, dw, db = mlp_layer_backward(cache.layer, da)
        self.store.grad(f"joint/{cache.side}_w")[...] += dw
        self.store.grad(f"joint/{cache.side}_b")[...] += db
        return dx


def score_pair(e_u, e_v) -> float:
    return cosine_sim(e_u, e_v)


def encode_item_matrix(encoder: TwoTowerEncoder, features: Features, item_indices=None, chunk: int = 4096) -> np.ndarray:
    """Clean (unperturbed) item representations, one row per item index."""
    idx = features.all_item_indices() if item_indices is None else np.asarray(item_indices)
    out = [encoder.encode_items(features.item_views(idx[s : s + chunk]))[0] for s in range(0, len(idx), chunk)]
    return np.vstack(out) if out else np.zeros((0, encoder.cfg.dim))


def encode_user_matrix(
    encoder: TwoTowerEncoder,
    features: Features,
    user_ids: Sequence[str],
    histories: Sequence[Sequence[int]],
    chunk: int = 4096,
) -> np.ndarray:
    """Clean user representations from the given histories."""
    out = []
    for s in range(0, len(user_ids), chunk):
        views = features.user_views(user_ids[s : s + chunk], histories[s : s + chunk])
        out.append(encoder.encode_users(views)[0])
    return np.vstack(out) if out else np.zeros((0, encoder.cfg.dim))
