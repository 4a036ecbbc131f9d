"""Offline top-N metrics, alignment/uniformity diagnostics, evaluation runs
and the ablation table."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

CHANNELS = ("u2i", "u2u", "i2i")
METRICS = ("recall", "ndcg", "hit_rate")


class EmptyHoldoutError(ValueError):
    pass


@dataclass
class EvalCase:
    user_id: Hashable
    recommended: Sequence[Hashable]
    holdout: frozenset

    def __post_init__(self):
        rec = [r[0] if isinstance(r, tuple) else r for r in self.recommended]
        if len(set(rec)) != len(rec):
            raise ValueError(f"duplicate recommendations for user {self.user_id!r}")
        self.recommended = rec
        self.holdout = frozenset(self.holdout)


def _hits(case: EvalCase, n: int) -> int:
    if n < 1:
        raise ValueError("N must be >= 1")
    if not case.holdout:
        raise EmptyHoldoutError(case.user_id)
    return sum(1 for r in case.recommended[:n] if r in case.holdout)


def recall_at_n(case: EvalCase, n: int) -> float:
    return _hits(case, n) / len(case.holdout)


def ndcg_at_n(case: EvalCase, n: int) -> float:
    """Binary-relevance DCG over the top-N, normalized by the ideal ranking."""
    _hits(case, n)
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(case.recommended[:n]) if item in case.holdout)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(n, len(case.holdout))))
    return dcg / idcg


def hit_rate_at_n(cases: Sequence[EvalCase], n: int) -> float:
    if not cases:
        raise ValueError("hit rate needs at least one case")
    return sum(_hits(c, n) > 0 for c in cases) / len(cases)


def alignment_metric(x: np.ndarray, y: np.ndarray) -> float:
    """Mean squared distance between paired unit vectors (alpha = 2)."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    if x.size == 0:
        raise ValueError("alignment of an empty set")
    return float(np.mean(np.sum((x - y) ** 2, axis=1)))


def uniformity_metric(x: np.ndarray, t: float = 2.0) -> float:
    """log of the mean of exp(-t ||xi - xj||^2) over distinct pairs."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least two vectors")
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(n, k=1)
    return float(np.log(np.mean(np.exp(-t * d2[iu]))))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    metrics: Dict[str, Dict[int, Dict[str, float]]]
    diagnostics: Dict[str, float]
    n_users: int
    skipped: int = 0
    config: Dict = field(default_factory=dict)

    def value(self, channel: str, metric: str, n: int) -> float:
        return self.metrics[channel][n][metric]

    def to_dict(self) -> Dict:
        return {
            "config": self.config,
            "n_users": self.n_users,
            "skipped": self.skipped,
            "metrics": {c: {str(n): m for n, m in v.items()} for c, v in self.metrics.items()},
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        metrics = {c: {int(n): dict(m) for n, m in v.items()} for c, v in d["metrics"].items()}
        return cls(metrics, dict(d["diagnostics"]), d["n_users"], d.get("skipped", 0), d.get("config", {}))

    def to_table(self, scale: float = 100.0) -> str:
        ns = sorted({n for v in self.metrics.values() for n in v})
        head = ["channel"] + [f"{m}@{n}" for n in ns for m in METRICS]
        rows = [head]
        for c, v in self.metrics.items():
            rows.append([c] + [f"{v[n][m] * scale:.3f}" for n in ns for m in METRICS])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
        diag = "  ".join(f"{k}={v:.4f}" for k, v in sorted(self.diagnostics.items()))
        return "\n".join(lines + [f"users={self.n_users} skipped={self.skipped}", diag])


def aggregate(cases_by_channel: Mapping[str, Sequence[EvalCase]], ns: Iterable[int]) -> Dict:
    out: Dict[str, Dict[int, Dict[str, float]]] = {}
    for ch, cases in cases_by_channel.items():
        out[ch] = {}
        for n in ns:
            out[ch][n] = {
                "recall": float(np.mean([recall_at_n(c, n) for c in cases])) if cases else 0.0,
                "ndcg": float(np.mean([ndcg_at_n(c, n) for c in cases])) if cases else 0.0,
                "hit_rate": hit_rate_at_n(cases, n) if cases else 0.0,
            }
    return out


# ---------------------------------------------------------------------------
# ablation table

SETTINGS: Tuple[Tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def setting_name(s: Tuple[bool, bool, bool]) -> str:
    if not any(s):
        return "base"
    return "-".join(n for n, on in zip(("UI", "UU", "II"), s) if on)


def _table(results, ns, scale: float, fmt: str) -> List[str]:
    head = ["Channel", "UI", "UU", "II"] + [f"{m}@{n}" for n in ns for m in ("Recall", "NDCG", "HitRate")]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for ch in CHANNELS:
        for s in SETTINGS:
            if s not in results:
                continue
            rep = results[s]
            marks = ["base"] * 3 if not any(s) else ["x" if on else "" for on in s]
            vals = [format(rep.value(ch, m, n) * scale, fmt) for n in ns for m in METRICS]
            lines.append("| " + " | ".join([ch.upper()] + marks + vals) + " |")
    return lines


def ablation_table(results: Mapping[Tuple[bool, bool, bool], EvalReport], ns: Sequence[int] = (20, 50)) -> str:
    """Markdown grid: one row per (inference channel, contrastive setting).

    The first table holds exact fractions; the second the x100 view.
    """
    if (False, False, False) not in results:
        raise ValueError("ablation results must include the base setting")
    out = ["## Fractions", ""] + _table(results, ns, 1.0, ".17g")
    out += ["", "## x100", ""] + _table(results, ns, 100.0, ".3f")
    return "\n".join(out) + "\n"


def parse_ablation_markdown(text: str) -> Dict[Tuple[str, Tuple[bool, bool, bool]], List[float]]:
    """Read back the fractions table: (channel, setting) -> metric values."""
    out = {}
    section = None
    for line in text.splitlines():
        if line.startswith("## "):
            section = line[3:].strip()
            continue
        if section != "Fractions" or not line.startswith("| ") or line.startswith("| Channel"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        ch = cells[0].lower()
        setting = tuple(c == "x" for c in cells[1:4])
        out[(ch, setting)] = [float(v) for v in cells[4:]]
    return out


# ---------------------------------------------------------------------------
# end-to-end evaluation


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def run_eval(encoder, data, channel_cfg=None, ns: Sequence[int] = (20, 50), which: str = "test",
             channels: Sequence[str] = CHANNELS, diagnostics: bool = True) -> EvalReport:
    """Encode eval users from their prefixes and score every channel.

    ``data`` is a ``trainer.TrainingData``.
    """
    from .channels import ChannelConfig, build_index, retrieve_i2i, retrieve_u2i, retrieve_u2u
    from .encoder import encode_item_matrix, encode_user_matrix

    cfg = channel_cfg or ChannelConfig()
    ns = sorted(set(int(n) for n in ns))
    k = max(ns)
    feats, split = data.features, data.split
    item_ids = feats.all_item_indices()
    item_reps = encode_item_matrix(encoder, feats, item_ids)
    item_index = build_index(item_reps, list(item_ids), "item")

    eval_users = [u for u in split.eval_users(which) if split.holdout.get(u)]
    skipped = len(split.eval_users(which)) - len(eval_users)
    prefixes = [split.prefix[u] for u in eval_users]
    user_reps = encode_user_matrix(encoder, feats, eval_users, prefixes) if eval_users else np.zeros((0, encoder.cfg.dim))

    user_index = None
    if "u2u" in channels:
        pool = list(split.train_users)
        pool_reps = encode_user_matrix(encoder, feats, pool, [data.histories[u] for u in pool])
        user_index = build_index(pool_reps, pool, "user")

    cases: Dict[str, List[EvalCase]] = {c: [] for c in channels}
    for u, e_u, prefix in zip(eval_users, user_reps, prefixes):
        seen = set(prefix) if cfg.exclude_seen else set()
        hold = frozenset(split.holdout[u])
        if "u2i" in channels:
            cases["u2i"].append(EvalCase(u, retrieve_u2i(e_u, item_index, k, seen), hold))
        if "u2u" in channels:
            ranked = retrieve_u2u(e_u, user_index, item_index, data.histories, cfg.n_similar, k,
                                  query_user=u, seen=seen, aggregation=cfg.aggregation)
            cases["u2u"].append(EvalCase(u, ranked, hold))
        if "i2i" in channels:
            ranked = retrieve_i2i(e_u, prefix, item_index, cfg.m_per_item, k, cfg.aggregation)
            if cfg.exclude_seen:
                ranked = [r for r in ranked if r[0] not in seen]
            cases["i2i"].append(EvalCase(u, ranked, hold))

    diag = {}
    if diagnostics and eval_users:
        zu = _unit_rows(user_reps)
        pairs_u, pairs_i = [], []
        for row, u in enumerate(eval_users):
            for i in split.holdout[u]:
                pairs_u.append(zu[row])
                pairs_i.append(item_index.vector(i))
        diag["ui_align"] = alignment_metric(np.array(pairs_u), np.array(pairs_i))
        if len(eval_users) >= 2:
            diag["uu_uniform"] = uniformity_metric(zu)
        diag["ii_uniform"] = uniformity_metric(item_index.matrix)
    return EvalReport(aggregate(cases, ns), diag, len(eval_users), skipped)
