"""Interaction logs, field files, vocabularies, splits and a synthetic
planted-cluster corpus."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
MASK = 1
PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"
NONE_TOKEN = "<none>"


class IngestError(ValueError):
    pass


class EmptyCorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    category: Optional[str] = None


@dataclass
class UserRecord:
    user_id: str
    gender: Optional[str] = None
    age: Optional[str] = None
    history: List[int] = field(default_factory=list)


@dataclass
class ItemRecord:
    item_id: str
    keywords: List[str] = field(default_factory=list)


class Vocab:
    """Token <-> index map with PAD at 0 and MASK at 1, first-seen ordering."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: List[str] = [PAD_TOKEN, MASK_TOKEN]
        self._stoi: Dict[str, int] = {PAD_TOKEN: PAD, MASK_TOKEN: MASK}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self._stoi.get(token)
        if idx is None:
            idx = len(self._itos)
            self._itos.append(token)
            self._stoi[token] = idx
        return idx

    def index(self, token: str) -> int:
        return self._stoi[token]

    def get(self, token: str, default: int = MASK) -> int:
        return self._stoi.get(token, default)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __len__(self) -> int:
        return len(self._itos)

    def tokens(self) -> List[str]:
        """Non-reserved tokens in index order."""
        return self._itos[2:]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens():
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


# ---------------------------------------------------------------------------
# parsing


def _delimiter(path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "tsv"
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    return "\t" if fmt == "tsv" else ","


def parse_interactions(path, format: Optional[str] = None, max_malformed: float = 0.01) -> List[Interaction]:
    """Read ``user, item, timestamp[, category]`` rows in file order.

    Malformed rows are skipped and logged; more than ``max_malformed`` of
    them (as a fraction of non-blank rows) raises ``IngestError``.
    """
    delim = _delimiter(path, format)
    out: List[Interaction] = []
    bad: List[int] = []
    total = 0
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            total += 1
            try:
                user, item, ts = row[0].strip(), row[1].strip(), int(row[2])
                if not user or not item or ts < 0:
                    raise ValueError
            except (IndexError, ValueError):
                bad.append(lineno)
                continue
            cat = row[3].strip() if len(row) > 3 and row[3].strip() else None
            out.append(Interaction(user, item, ts, cat))
    if total == 0:
        log.warning("no interactions in %s", path)
    if bad:
        log.warning("%d malformed rows in %s (lines %s)", len(bad), path, bad[:20])
        if len(bad) > max_malformed * total:
            raise IngestError(f"{len(bad)}/{total} malformed rows in {path}, lines {bad[:20]}")
    return out


def age_bucket(age: Optional[str]) -> Optional[str]:
    if age is None or age == "":
        return None
    try:
        return f"{int(float(age)) // 10 * 10}s"
    except ValueError:
        return age


def parse_user_fields(path, format: Optional[str] = None) -> Dict[str, Tuple[Optional[str], Optional[str]]]:
    delim = _delimiter(path, format)
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter=delim):
            if not row or not row[0].strip():
                continue
            gender = row[1].strip() or None if len(row) > 1 else None
            age = age_bucket(row[2].strip()) if len(row) > 2 else None
            out[row[0].strip()] = (gender, age)
    return out


def parse_item_fields(path, format: Optional[str] = None) -> Dict[str, List[str]]:
    delim = _delimiter(path, format)
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter=delim):
            if not row or not row[0].strip():
                continue
            kws = [k for k in row[1].split("|") if k] if len(row) > 1 else []
            out[row[0].strip()] = kws
    return out


# ---------------------------------------------------------------------------
# histories


@dataclass
class Corpus:
    users: List[UserRecord]
    items: List[ItemRecord]
    user_vocab: Vocab
    item_vocab: Vocab
    gender_vocab: Vocab = field(default_factory=Vocab)
    age_vocab: Vocab = field(default_factory=Vocab)
    keyword_vocab: Vocab = field(default_factory=Vocab)

    @property
    def num_interactions(self) -> int:
        return sum(len(u.history) for u in self.users)

    def stats_line(self) -> str:
        return f"users={len(self.users)} items={len(self.items)} interactions={self.num_interactions}"


def build_histories(
    interactions: Sequence[Interaction],
    min_user_len: int = 5,
    min_item_freq: int = 5,
    user_fields: Optional[Dict[str, Tuple[Optional[str], Optional[str]]]] = None,
    item_fields: Optional[Dict[str, List[str]]] = None,
) -> Corpus:
    """Filter to the (min_user_len, min_item_freq) fixpoint and build records.

    Histories are sorted by timestamp with ties kept in input order. Items
    without a keyword entry fall back to their category tokens.
    """
    rows = list(interactions)
    while True:
        user_len = Counter(r.user_id for r in rows)
        kept = [r for r in rows if user_len[r.user_id] >= min_user_len]
        item_freq = Counter(r.item_id for r in kept)
        kept = [r for r in kept if item_freq[r.item_id] >= min_item_freq]
        if len(kept) == len(rows):
            break
        rows = kept
    if not rows:
        raise EmptyCorpusError("no interactions survive filtering")

    by_user: Dict[str, List[Tuple[int, int, Interaction]]] = defaultdict(list)
    user_order: List[str] = []
    for pos, r in enumerate(rows):
        if r.user_id not in by_user:
            user_order.append(r.user_id)
        by_user[r.user_id].append((r.timestamp, pos, r))

    item_vocab = Vocab()
    categories: Dict[str, List[str]] = defaultdict(list)
    for r in rows:
        item_vocab.add(r.item_id)
        if r.category and r.category not in categories[r.item_id]:
            categories[r.item_id].append(r.category)

    user_vocab = Vocab(user_order)
    gender_vocab, age_vocab, kw_vocab = Vocab(), Vocab(), Vocab()
    user_fields = user_fields or {}
    users = []
    for uid in user_order:
        events = sorted(by_user[uid], key=lambda t: (t[0], t[1]))
        gender, age = user_fields.get(uid, (None, None))
        gender_vocab.add(gender or NONE_TOKEN)
        age_vocab.add(age or NONE_TOKEN)
        users.append(UserRecord(uid, gender, age, [item_vocab.index(e[2].item_id) for e in events]))

    items = []
    for iid in item_vocab.tokens():
        kws = (item_fields or {}).get(iid) or categories.get(iid, [])
        for k in kws:
            kw_vocab.add(k)
        items.append(ItemRecord(iid, list(kws)))
    return Corpus(users, items, user_vocab, item_vocab, gender_vocab, age_vocab, kw_vocab)


# ---------------------------------------------------------------------------
# split


@dataclass
class SplitDataset:
    train_users: List[str]
    valid_users: List[str]
    test_users: List[str]
    prefix: Dict[str, List[int]]
    holdout: Dict[str, List[int]]
    moved_to_train: int = 0

    def eval_users(self, which: str) -> List[str]:
        return {"valid": self.valid_users, "test": self.test_users}[which]


def split_dataset(
    users: Sequence[UserRecord],
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    prefix_fraction: float = 0.8,
    seed: int = 0,
) -> SplitDataset:
    """User-level split; eval users keep a chronological prefix and hold out the rest.

    Holdout lists are deduplicated in first-seen order.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if not 0 < prefix_fraction < 1:
        raise ValueError("prefix_fraction must lie in (0, 1)")
    n = len(users)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_valid = min(n_valid, n - n_train)
    parts = {
        "train": [users[i] for i in order[:n_train]],
        "valid": [users[i] for i in order[n_train : n_train + n_valid]],
        "test": [users[i] for i in order[n_train + n_valid :]],
    }
    prefix, holdout = {}, {}
    train_ids = [u.user_id for u in parts["train"]]
    moved = 0
    kept = {"valid": [], "test": []}
    for name in ("valid", "test"):
        for u in parts[name]:
            cut = math.ceil(prefix_fraction * len(u.history))
            head, tail = u.history[:cut], u.history[cut:]
            if not tail or not head:
                train_ids.append(u.user_id)
                moved += 1
                continue
            prefix[u.user_id] = list(head)
            holdout[u.user_id] = list(dict.fromkeys(tail))
            kept[name].append(u.user_id)
    if moved:
        log.warning("%d eval users had an empty holdout and were moved to train", moved)
    return SplitDataset(train_ids, kept["valid"], kept["test"], prefix, holdout, moved)


def write_split(split: SplitDataset, user_vocab_or_items: Vocab, out_dir) -> None:
    """Three user-list files plus ``holdout.tsv`` (user, item token per row)."""
    for name in ("train", "valid", "test"):
        with open(os.path.join(out_dir, f"{name}_users.txt"), "w", encoding="utf-8") as fh:
            for u in getattr(split, f"{name}_users"):
                fh.write(u + "\n")
    with open(os.path.join(out_dir, "holdout.tsv"), "w", encoding="utf-8") as fh:
        for u in split.valid_users + split.test_users:
            for i in split.holdout[u]:
                fh.write(f"{u}\t{user_vocab_or_items.token(i)}\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticCorpus:
    interactions: List[Interaction]
    user_fields: Dict[str, Tuple[str, str]]
    item_fields: Dict[str, List[str]]
    user_cluster: Dict[str, int]
    item_cluster: Dict[str, int]


def gen_synthetic(
    num_clusters: int = 4,
    users_per_cluster: int = 100,
    items_per_cluster: int = 100,
    in_cluster_prob: float = 0.9,
    history_len: int = 20,
    seed: int = 0,
    keyword_noise: float = 0.5,
    field_noise: float = 0.5,
) -> SyntheticCorpus:
    """Planted-cluster corpus.

    Each user draws ``history_len`` distinct items, each from its own cluster
    with probability ``in_cluster_prob`` and otherwise uniformly from the
    other clusters. Gender/age tokens follow the user's cluster, and the
    item keyword names the item's cluster, each replaced by a random
    cluster's token with probability ``field_noise`` / ``keyword_noise``.
    """
    if not 0.5 < in_cluster_prob <= 1:
        raise ValueError("in_cluster_prob must lie in (0.5, 1]")
    if min(num_clusters, users_per_cluster, items_per_cluster, history_len) < 1:
        raise ValueError("counts must be positive")
    if history_len > items_per_cluster * num_clusters:
        raise ValueError("history_len exceeds the item pool")
    rng = np.random.default_rng(seed)
    n_items = num_clusters * items_per_cluster
    item_ids = [f"i{j}" for j in range(n_items)]
    item_cluster = {iid: j // items_per_cluster for j, iid in enumerate(item_ids)}
    by_cluster = [np.arange(c * items_per_cluster, (c + 1) * items_per_cluster) for c in range(num_clusters)]

    def noisy(c: int, noise: float) -> int:
        return int(rng.integers(num_clusters)) if rng.random() < noise else c

    item_fields = {iid: [f"kw{noisy(item_cluster[iid], keyword_noise)}"] for iid in item_ids}
    interactions, user_fields, user_cluster = [], {}, {}
    ts = 0
    for c in range(num_clusters):
        others = np.setdiff1d(np.arange(n_items), by_cluster[c])
        for k in range(users_per_cluster):
            uid = f"u{c * users_per_cluster + k}"
            user_cluster[uid] = c
            user_fields[uid] = (f"g{noisy(c, field_noise) % 2}", str(20 + 10 * noisy(c, field_noise)))
            chosen: List[int] = []
            seen = set()
            while len(chosen) < history_len:
                pool = by_cluster[c] if rng.random() < in_cluster_prob or others.size == 0 else others
                fresh = [j for j in pool if j not in seen]
                if not fresh:
                    pool = others if pool is by_cluster[c] else by_cluster[c]
                    fresh = [j for j in pool if j not in seen]
                j = int(fresh[rng.integers(len(fresh))])
                seen.add(j)
                chosen.append(j)
            for j in chosen:
                interactions.append(Interaction(uid, item_ids[j], ts, None))
                ts += 1
    return SyntheticCorpus(interactions, user_fields, item_fields, user_cluster, item_cluster)


def write_synthetic(corpus: SyntheticCorpus, out_dir) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "interactions": os.path.join(out_dir, "interactions.tsv"),
        "user_fields": os.path.join(out_dir, "user_fields.tsv"),
        "item_fields": os.path.join(out_dir, "item_fields.tsv"),
        "ground_truth": os.path.join(out_dir, "ground_truth.tsv"),
    }
    with open(paths["interactions"], "w", encoding="utf-8") as fh:
        for r in corpus.interactions:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\n")
    with open(paths["user_fields"], "w", encoding="utf-8") as fh:
        for uid, (g, a) in corpus.user_fields.items():
            fh.write(f"{uid}\t{g}\t{a}\n")
    with open(paths["item_fields"], "w", encoding="utf-8") as fh:
        for iid, kws in corpus.item_fields.items():
            fh.write(f"{iid}\t{'|'.join(kws)}\n")
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        for uid, c in corpus.user_cluster.items():
            fh.write(f"user\t{uid}\t{c}\n")
        for iid, c in corpus.item_cluster.items():
            fh.write(f"item\t{iid}\t{c}\n")
    return paths


# ---------------------------------------------------------------------------
# prepared corpus on disk


def save_prepared(corpus: Corpus, split: SplitDataset, out_dir, header: str = "") -> None:
    """Vocab files, ``histories.tsv``, ``items.tsv``, split files and ``prefix.tsv``."""
    os.makedirs(out_dir, exist_ok=True)
    for name in ("user", "item", "gender", "age", "keyword"):
        getattr(corpus, f"{name}_vocab").save(os.path.join(out_dir, f"{name}s.vocab"))
    iv = corpus.item_vocab
    with open(os.path.join(out_dir, "histories.tsv"), "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for u in corpus.users:
            items = " ".join(iv.token(i) for i in u.history)
            fh.write(f"{u.user_id}\t{u.gender or ''}\t{u.age or ''}\t{items}\n")
    with open(os.path.join(out_dir, "items.tsv"), "w", encoding="utf-8") as fh:
        for it in corpus.items:
            fh.write(f"{it.item_id}\t{'|'.join(it.keywords)}\n")
    write_split(split, iv, out_dir)
    with open(os.path.join(out_dir, "prefix.tsv"), "w", encoding="utf-8") as fh:
        for u in split.valid_users + split.test_users:
            fh.write(f"{u}\t{' '.join(iv.token(i) for i in split.prefix[u])}\n")


def _read_rows(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                yield line.split("\t")


def load_prepared(out_dir) -> Tuple[Corpus, SplitDataset]:
    j = lambda name: os.path.join(out_dir, name)  # noqa: E731
    vocabs = {n: Vocab.load(j(f"{n}s.vocab")) for n in ("user", "item", "gender", "age", "keyword")}
    iv = vocabs["item"]
    users = []
    for row in _read_rows(j("histories.tsv")):
        uid, gender, age, items = (row + ["", "", ""])[:4]
        users.append(UserRecord(uid, gender or None, age or None, [iv.index(t) for t in items.split()]))
    items = [ItemRecord(r[0], [k for k in (r[1] if len(r) > 1 else "").split("|") if k]) for r in _read_rows(j("items.tsv"))]
    corpus = Corpus(users, items, vocabs["user"], iv, vocabs["gender"], vocabs["age"], vocabs["keyword"])

    def user_list(name):
        with open(j(f"{name}_users.txt"), encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]

    prefix = {r[0]: [iv.index(t) for t in r[1].split()] for r in _read_rows(j("prefix.tsv"))}
    holdout: Dict[str, List[int]] = defaultdict(list)
    for u, t in _read_rows(j("holdout.tsv")):
        holdout[u].append(iv.index(t))
    split = SplitDataset(user_list("train"), user_list("valid"), user_list("test"), prefix, dict(holdout))
    return corpus, split
