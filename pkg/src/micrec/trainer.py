"""Mini-batch training loop, mining refresh, early stopping and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .augment import (
    MiningConfig,
    PerturbConfig,
    SupportSet,
    mask_item_views,
    mask_user_views,
    mine_cross_space,
    mine_support,
)
from .channels import ChannelConfig
from .dataset import Corpus, SplitDataset
from .encoder import (
    EncoderConfig,
    Features,
    TwoTowerEncoder,
    encode_item_matrix,
    encode_user_matrix,
)
from .numcore import DivergedTrainingError, ParamStore, adam_step
from .objective import ContrastiveBatch, LossWeights, loss_total, loss_uv

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # encoder
    dim: int = 128
    hidden_sizes: Tuple[int, ...] = (256, 128)
    max_history: int = 50
    share_item_table: bool = True
    # optimisation
    batch_size: int = 1024
    lr: float = 0.001
    epochs: int = 30
    seed: int = 0
    eval_every: int = 0  # 0: once per epoch
    patience: int = 3
    # loss
    lam: float = 0.7
    w_uv: float = 1.0
    w_uu: float = 1.0
    w_vv: float = 1.0
    tau: float = 0.1
    strict_paper_denominator: bool = False
    view_negatives: str = "views"
    w_joint: float = 1.0
    # perturbation
    field_mask_prob: float = 0.15
    max_masked_fields: int = -1  # -1: all fields but one
    feature_dropout_rate: float = 0.2
    # mining
    mining: bool = True
    k_neighbors: int = 5
    num_clusters: int = 20
    hard_negatives_per_anchor: int = 5
    refresh_every: int = 1000
    # data usage
    train_on_eval_prefixes: bool = True
    leave_target_out: bool = True
    # validation channels
    n_similar: int = 50
    m_per_item: int = 20
    aggregation: str = "sum"
    # checkpoints
    save_adam_state: bool = False

    def __post_init__(self):
        if isinstance(self.hidden_sizes, str):
            self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes.split(",") if h)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.view_negatives not in ("views", "both"):
            raise ConfigError("view_negatives must be views or both")
        self.loss_weights()

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small CPU-scale defaults (the full-scale ones are the class defaults)."""
        base = dict(dim=32, hidden_sizes=(64, 64), batch_size=128, epochs=10, refresh_every=100)
        base.update(overrides)
        return cls(**base)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.dim, self.hidden_sizes, "mean", self.share_item_table, self.max_history)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.w_uv, self.w_uu, self.w_vv)

    def perturb_config(self) -> PerturbConfig:
        cap = None if self.max_masked_fields < 0 else self.max_masked_fields
        return PerturbConfig(self.field_mask_prob, cap, self.feature_dropout_rate, self.seed)

    def mining_config(self) -> MiningConfig:
        return MiningConfig(self.k_neighbors, self.num_clusters, self.hard_negatives_per_anchor, self.refresh_every)

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(self.n_similar, self.m_per_item, self.aggregation)

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def echo(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, pairs: Dict[str, str]) -> "TrainConfig":
        """Apply string key/value overrides, coercing to field types."""
        kinds = {f.name: f.type for f in dataclasses.fields(self)}
        kw = {}
        for key, raw in pairs.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(kinds[key], raw, key)
        return self.replace(**kw)


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        return raw
    kind = str(kind)
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError
            return low in ("1", "true", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("Tuple"):
            return tuple(int(h) for h in raw.replace(" ", "").split(",") if h)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def read_config_file(path) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# data bundle


@dataclass
class TrainingData:
    corpus: Corpus
    split: SplitDataset
    features: Features
    # user id -> item indices visible to training (full history or prefix)
    histories: Dict[str, List[int]]
    # users whose histories feed training batches, in a fixed order
    train_user_ids: List[str]

    @classmethod
    def build(cls, corpus: Corpus, split: SplitDataset, max_history: int = 50,
              train_on_eval_prefixes: bool = True) -> "TrainingData":
        full = {u.user_id: list(u.history) for u in corpus.users}
        histories = {u: full[u] for u in split.train_users}
        ids = list(split.train_users)
        for u in split.valid_users + split.test_users:
            histories[u] = list(split.prefix[u])
            if train_on_eval_prefixes:
                ids.append(u)
        return cls(corpus, split, Features(corpus, max_history), histories, ids)


def training_pairs(data: TrainingData) -> List[Tuple[int, int]]:
    """(row in ``train_user_ids``, history position) for every training interaction."""
    return [(r, p) for r, u in enumerate(data.train_user_ids) for p in range(len(data.histories[u]))]


def build_batches(pairs: Sequence, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffle by (seed, epoch) and yield index arrays into ``pairs``; a final batch < 2 is dropped."""
    if len(pairs) == 0:
        raise ValueError("empty training set")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    for s in range(0, len(order), batch_size):
        chunk = order[s : s + batch_size]
        if len(chunk) >= 2:
            yield chunk


# ---------------------------------------------------------------------------
# training


@dataclass
class Support:
    users: Optional[SupportSet] = None
    items: Optional[SupportSet] = None
    u2i: Optional[List[np.ndarray]] = None
    i2u: Optional[List[np.ndarray]] = None
    step: int = 0


@dataclass
class TrainResult:
    encoder: TwoTowerEncoder
    log_lines: List[str] = field(default_factory=list)
    losses: List[Dict[str, float]] = field(default_factory=list)
    evals: List[Dict[str, float]] = field(default_factory=list)
    best_step: int = 0
    best_recall: float = -1.0

    def epoch_mean_loss(self, epoch: int) -> float:
        vals = [r["total"] for r in self.losses if r["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


class Trainer:
    def __init__(self, cfg: TrainConfig, data: TrainingData, encoder: Optional[TwoTowerEncoder] = None):
        self.cfg = cfg
        self.data = data
        self.encoder = encoder or TwoTowerEncoder.for_corpus(cfg.encoder_config(), data.corpus, cfg.seed)
        self.weights = cfg.loss_weights()
        self.perturb = cfg.perturb_config()
        self.mining = cfg.mining_config()
        self.pairs = training_pairs(data)
        self.support = Support()
        # item pool = every item index >= 2; pool row = index - 2
        self.item_pool = data.features.all_item_indices()
        self.user_pool_row = {u: r for r, u in enumerate(data.train_user_ids)}
        self.lines: List[str] = []

    # -- switches --------------------------------------------------------

    @property
    def uses_uv(self) -> bool:
        return self.weights.lam < 1 and self.weights.w_uv > 0

    @property
    def uses_uu(self) -> bool:
        return self.weights.lam < 1 and self.weights.w_uu > 0

    @property
    def uses_vv(self) -> bool:
        return self.weights.lam < 1 and self.weights.w_vv > 0

    @property
    def mining_on(self) -> bool:
        return self.cfg.mining and (self.uses_uv or self.uses_uu or self.uses_vv)

    # -- batch assembly --------------------------------------------------

    def _batch_histories(self, chunk: np.ndarray):
        users, items, hists = [], [], []
        for c in chunk:
            r, p = self.pairs[c]
            u = self.data.train_user_ids[r]
            h = self.data.histories[u]
            users.append(u)
            items.append(h[p])
            if self.cfg.leave_target_out and len(h) > 1:
                hists.append(h[:p] + h[p + 1 :])
            else:
                hists.append(h)
        return users, np.array(items, dtype=np.int64), hists

    def _pool_user_views(self, rows: np.ndarray):
        ids = [self.data.train_user_ids[r] for r in rows]
        return self.data.features.user_views(ids, [self.data.histories[u] for u in ids])

    # -- mining ----------------------------------------------------------

    def refresh_support(self, step: int, rng: np.random.Generator) -> None:
        enc, feats = self.encoder, self.data.features
        ids = self.data.train_user_ids
        sup = Support(step=step)
        user_reps = item_reps = None
        if self.uses_uu or self.uses_uv:
            user_reps = encode_user_matrix(enc, feats, ids, [self.data.histories[u] for u in ids])
        if self.uses_vv or self.uses_uv:
            item_reps = encode_item_matrix(enc, feats, self.item_pool)
        if self.uses_uu:
            sup.users, km_u = mine_support(user_reps, self.mining, rng, step)
        if self.uses_vv:
            sup.items, km_i = mine_support(item_reps, self.mining, rng, step)
        if self.uses_uv:
            uj, _ = enc.project_joint(user_reps, "user")
            ij, _ = enc.project_joint(item_reps, "item")
            sup.u2i, sup.i2u = mine_cross_space(uj, ij, self.mining.k_neighbors)
        self.support = sup
        parts = [f"mine step={step}"]
        for name, s in (("users", sup.users), ("items", sup.items)):
            if s is not None:
                parts.append(f"{name}_pos={sum(len(p) for p in s.positives)}")
                parts.append(f"{name}_neg={sum(len(n) for n in s.negatives)}")
        if sup.u2i is not None:
            sims = [float(uj[a] @ ij[b]) for a, row in enumerate(sup.u2i) for b in row]
            parts.append(f"cross_mean_sim={np.mean(sims) if sims else float('nan')!r}")
        self._emit(" ".join(parts))

    def _extras(self, anchors_pool_rows, support: Optional[SupportSet], cross: Optional[List[np.ndarray]], cross_rows):
        """Collect mined pool rows and map them to per-anchor block rows."""
        wanted: Dict[int, int] = {}

        def slot(r):
            r = int(r)
            if r not in wanted:
                wanted[r] = len(wanted)
            return wanted[r]

        pos = neg = None
        if support is not None:
            pos = [np.array([slot(r) for r in support.positives[a]], dtype=np.int64) for a in anchors_pool_rows]
            neg = [np.array([slot(r) for r in support.negatives[a]], dtype=np.int64) for a in anchors_pool_rows]
        xpos = None
        if cross is not None:
            xpos = [np.array([slot(r) for r in cross[a]], dtype=np.int64) for a in cross_rows]
        return np.array(list(wanted), dtype=np.int64), pos, neg, xpos

    # -- one step --------------------------------------------------------

    def step(self, chunk: np.ndarray, step: int) -> Dict[str, float]:
        cfg, enc, feats = self.cfg, self.encoder, self.data.features
        rng = np.random.default_rng([cfg.seed, 7, step])
        users, items, hists = self._batch_histories(chunk)
        n = len(users)
        uviews = feats.user_views(users, hists)
        iviews = feats.item_views(items)
        rate = self.perturb.feature_dropout_rate

        def user_view():
            return enc.encode_users(mask_user_views(uviews, self.perturb, rng), rate, rng)

        def item_view():
            return enc.encode_items(mask_item_views(iviews, self.perturb, rng), rate, rng)

        ua, ua_c = user_view()
        ia, ia_c = item_view()
        ub = ib = ub_c = ib_c = None
        if self.uses_uu:
            ub, ub_c = user_view()
        if self.uses_vv:
            ib, ib_c = item_view()

        sup = self.support
        batch = ContrastiveBatch(
            user_a=ua, item_a=ia, user_b=ub, item_b=ib, tau=cfg.tau,
            strict_paper_denominator=cfg.strict_paper_denominator, view_negatives=cfg.view_negatives,
        )
        perm = rng.permutation(n)
        neg = np.empty(n, dtype=np.int64)
        neg[perm] = perm[np.roll(np.arange(n), -1)]
        batch.neg_perm = neg

        ux_c = ix_c = None
        user_rows = np.array([self.user_pool_row[u] for u in users])
        item_rows = items - 2
        if self.mining_on and (sup.users is not None or sup.u2i is not None or sup.items is not None):
            u_sup = sup.users if self.uses_uu else None
            i_sup = sup.items if self.uses_vv else None
            i2u = sup.i2u if self.uses_uv else None
            u2i = sup.u2i if self.uses_uv else None
            urows, batch.user_pos, batch.user_neg, batch.i2u_pos = self._extras(user_rows, u_sup, i2u, item_rows)
            irows, batch.item_pos, batch.item_neg, batch.u2i_pos = self._extras(item_rows, i_sup, u2i, user_rows)
            if urows.size:
                batch.user_extra, ux_c = enc.encode_users(self._pool_user_views(urows))
            else:
                batch.i2u_pos = batch.user_pos = batch.user_neg = None
            if irows.size:
                batch.item_extra, ix_c = enc.encode_items(feats.item_views(self.item_pool[irows]))
            else:
                batch.u2i_pos = batch.item_pos = batch.item_neg = None

        res = loss_total(batch, self.weights)
        if not math.isfinite(res.total):
            raise DivergedTrainingError(
                f"non-finite loss at step {step}: users={users[:20]} items={items[:20].tolist()} "
                f"components={res.components}"
            )
        g = res.grads
        enc.backward_users(ua_c, g["user_a"])
        enc.backward_items(ia_c, g["item_a"])
        if ub_c is not None:
            enc.backward_users(ub_c, g["user_b"])
        if ib_c is not None:
            enc.backward_items(ib_c, g["item_b"])
        if ux_c is not None:
            enc.backward_users(ux_c, g["user_extra"])
        if ix_c is not None:
            enc.backward_items(ix_c, g["item_extra"])

        joint = 0.0
        if self.mining_on and self.uses_uv and cfg.w_joint > 0:
            # projection head learns pair alignment on detached tower outputs
            pu, pu_c = enc.project_joint(ua, "user")
            pi, pi_c = enc.project_joint(ia, "item")
            joint, jg = loss_uv(ContrastiveBatch(user_a=pu, item_a=pi, tau=cfg.tau))
            enc.backward_joint(pu_c, cfg.w_joint * jg["user_a"])
            enc.backward_joint(pi_c, cfg.w_joint * jg["item_a"])

        adam_step(enc.store, cfg.lr)
        enc.store.zero_grad()
        rec = {k: res.components.get(k, 0.0) for k in ("basic", "uv", "uu", "vv")}
        rec["total"] = res.total
        rec["joint"] = joint
        return rec

    # -- loop ------------------------------------------------------------

    def _emit(self, line: str) -> None:
        self.lines.append(line)
        log.debug(line)

    def validate(self) -> float:
        from .evalkit import run_eval

        rep = run_eval(self.encoder, self.data, self.cfg.channel_config(), ns=(20,), which="valid",
                       channels=("u2i",), diagnostics=False)
        return rep.value("u2i", "recall", 20) if rep.n_users else 0.0

    def train(self) -> TrainResult:
        cfg = self.cfg
        result = TrainResult(self.encoder, self.lines)
        best: Optional[ParamStore] = None
        bad_evals = 0
        step = 0
        mine_rng = np.random.default_rng([cfg.seed, 11])
        has_valid = bool(self.data.split.valid_users)
        stop = False
        for epoch in range(cfg.epochs):
            for chunk in build_batches(self.pairs, cfg.batch_size, cfg.seed, epoch):
                if self.mining_on and step > 0 and step % cfg.refresh_every == 0:
                    self.refresh_support(step, mine_rng)
                rec = self.step(chunk, step)
                step += 1
                rec.update(step=step, epoch=epoch)
                result.losses.append(rec)
                self._emit(
                    f"step={step} epoch={epoch} L_basic={rec['basic']!r} L_uv={rec['uv']!r} "
                    f"L_uu={rec['uu']!r} L_vv={rec['vv']!r} total={rec['total']!r} L_joint={rec['joint']!r}"
                )
                if cfg.eval_every and step % cfg.eval_every == 0 and has_valid:
                    best, bad_evals, stop = self._evaluate(result, step, epoch, best, bad_evals)
                    if stop:
                        break
            if stop:
                break
            if not cfg.eval_every and has_valid:
                best, bad_evals, stop = self._evaluate(result, step, epoch, best, bad_evals)
                if stop:
                    break
        if best is not None:
            self.encoder.store = best
        return result

    def _evaluate(self, result: TrainResult, step: int, epoch: int, best, bad_evals: int):
        recall = self.validate()
        result.evals.append({"step": step, "epoch": epoch, "recall20": recall})
        self._emit(f"eval step={step} epoch={epoch} valid_u2i_recall20={recall!r}")
        if recall > result.best_recall:
            result.best_recall = recall
            result.best_step = step
            return self.encoder.store.copy(), 0, False
        bad_evals += 1
        return best, bad_evals, bad_evals >= self.cfg.patience


def train(cfg: TrainConfig, data: TrainingData, encoder: Optional[TwoTowerEncoder] = None) -> TrainResult:
    return Trainer(cfg, data, encoder).train()


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MICCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: ParamStore, path, config_echo: str = "{}", step: Optional[int] = None,
                    save_adam: bool = False) -> None:
    """Little-endian: magic, u32 version, u64 step, length-prefixed config echo,
    u32 tensor count, tensors (name, u32 rows, u32 cols, f64 data), CRC32."""
    tensors = [(name, p.value) for name, p in store.items()]
    if save_adam:
        tensors += [(f"adam_m/{name}", p.adam_m) for name, p in store.items()]
        tensors += [(f"adam_v/{name}", p.adam_v) for name, p in store.items()]
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IQ", VERSION, store.step_count if step is None else step)
    echo = config_echo.encode("utf-8")
    buf += struct.pack("<I", len(echo)) + echo
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<II", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


@dataclass
class Checkpoint:
    version: int
    step: int
    config_echo: str
    tensors: Dict[str, np.ndarray]

    @property
    def config(self) -> Dict:
        return json.loads(self.config_echo)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    body, tail = data[:-4], data[-4:]
    if struct.unpack("<I", tail)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = len(MAGIC)
    version, step = struct.unpack_from("<IQ", body, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 12
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    echo = body[off : off + n].decode("utf-8")
    off += n
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + ln].decode("utf-8")
        off += ln
        rows, cols = struct.unpack_from("<II", body, off)
        off += 8
        size = rows * cols * 8
        if off + size > len(body):
            raise CheckpointError(f"{path}: tensor {name!r} overruns file")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += size
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(version, step, echo, tensors)


def restore_into(ckpt: Checkpoint, store: ParamStore) -> ParamStore:
    """Copy checkpoint tensors into an existing store, checking names and shapes."""
    for name, p in store.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        t = ckpt.tensors[name]
        if t.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {t.shape} vs model {p.value.shape}")
    for name, p in store.items():
        p.value[...] = ckpt.tensors[name]
        if f"adam_m/{name}" in ckpt.tensors:
            p.adam_m[...] = ckpt.tensors[f"adam_m/{name}"]
            p.adam_v[...] = ckpt.tensors[f"adam_v/{name}"]
    store.step_count = ckpt.step
    return store
