"""Small fixtures shared by unit and acceptance tests."""

import numpy as np

from micrec.encoder import EncoderConfig, ItemViews, TwoTowerEncoder, UserViews
from micrec.numcore import ParamStore


def tiny_encoder(dim=8, hidden=(8,), seed=0, share=True):
    cfg = EncoderConfig(dim=dim, hidden_sizes=hidden, share_item_table=share)
    return TwoTowerEncoder(cfg, n_users=7, n_items=9, n_genders=4, n_ages=4, n_keywords=5, seed=seed)


def tiny_user_views():
    # row 1 repeats an item, row 3 is a single-item history
    return UserViews(
        uid=np.array([2, 3, 4, 5]),
        gender=np.array([2, 3, 2, 1]),
        age=np.array([2, 2, 3, 3]),
        history=np.array([[2, 3, 4], [5, 5, 0], [6, 7, 8], [3, 0, 0]]),
    )


def tiny_item_views():
    return ItemViews(iid=np.array([2, 3, 4, 8]), keywords=np.array([[2, 3], [4, 0], [2, 0], [1, 0]]))


def tower_loss(encoder, side, upstream):
    """``sum(reps * upstream)`` and its analytic gradients, for grad_check."""
    views = tiny_user_views() if side == "user" else tiny_item_views()

    def fn(store: ParamStore):
        store.zero_grad()
        if side == "user":
            reps, cache = encoder.encode_users(views)
            encoder.backward_users(cache, upstream)
        else:
            reps, cache = encoder.encode_items(views)
            encoder.backward_items(cache, upstream)
        return float(np.sum(reps * upstream)), {k: store.grad(k).copy() for k in store}

    return fn


def random_batch(rng, n=4, d=8, extra=0, tau=0.5):
    from micrec.objective import ContrastiveBatch

    mats = {k: rng.normal(size=(n, d)) for k in ("user_a", "item_a", "user_b", "item_b")}
    kw = dict(mats, tau=tau, neg_perm=np.roll(np.arange(n), 1))
    if extra:
        kw["user_extra"] = rng.normal(size=(extra, d))
        kw["item_extra"] = rng.normal(size=(extra, d))
    return ContrastiveBatch(**kw)
