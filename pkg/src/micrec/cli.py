"""Command-line entry point: prepare, synth, train, eval, retrieve, ablate.

Every command is deterministic given its inputs, config and seed. Data goes
to files; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dataset as ds
from .channels import build_index, format_retrieval_rows, retrieve_i2i, retrieve_u2i, retrieve_u2u
from .encoder import TwoTowerEncoder, encode_item_matrix, encode_user_matrix
from .evalkit import CHANNELS, ablation_table, run_eval, setting_name
from .trainer import (
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingData,
    load_checkpoint,
    read_config_file,
    restore_into,
    save_checkpoint,
)

log = logging.getLogger("micrec")


class CommandError(RuntimeError):
    pass


def _out_dir(path: str, force: bool) -> str:
    if os.path.exists(path) and os.listdir(path) and not force:
        raise CommandError(f"{path} exists and is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def _echo(args: argparse.Namespace, extra: Optional[Dict] = None) -> str:
    d = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    if extra:
        d.update(extra)
    return json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)


# ---------------------------------------------------------------------------
# config flags


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (flags override --config)")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None, metavar="V")


def _config_from(args) -> TrainConfig:
    base = TrainConfig.desk() if getattr(args, "desk", False) else TrainConfig()
    pairs: Dict[str, str] = {}
    if getattr(args, "config", None):
        pairs.update(read_config_file(args.config))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            pairs[f.name] = v
    return base.with_overrides(pairs)


def _load_data(path: str, cfg: TrainConfig) -> TrainingData:
    try:
        corpus, split = ds.load_prepared(path)
    except FileNotFoundError as e:
        raise CommandError(f"prepared data missing in {path}: {e.filename}") from None
    return TrainingData.build(corpus, split, cfg.max_history, cfg.train_on_eval_prefixes)


def _load_model(data_dir: str, ckpt_path: str):
    if not os.path.exists(ckpt_path):
        raise CommandError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in ckpt.config.items() if k in known})
    data = _load_data(data_dir, cfg)
    enc = TwoTowerEncoder.for_corpus(cfg.encoder_config(), data.corpus, cfg.seed)
    restore_into(ckpt, enc.store)
    return cfg, data, enc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = _out_dir(args.out, args.force)
    syn = ds.gen_synthetic(args.clusters, args.users_per_cluster, args.items_per_cluster, args.in_cluster_prob,
                           args.history_len, args.seed, args.keyword_noise, args.field_noise)
    paths = ds.write_synthetic(syn, out)
    print(f"users={len(syn.user_cluster)} items={len(syn.item_cluster)} interactions={len(syn.interactions)}",
          file=sys.stderr)
    for k, v in paths.items():
        print(f"{k}: {v}", file=sys.stderr)
    return 0


def cmd_prepare(args) -> int:
    ratios = tuple(float(r) for r in args.ratios.split(","))
    inter = ds.parse_interactions(args.interactions, args.format)
    ufields = ds.parse_user_fields(args.user_fields) if args.user_fields else None
    ifields = ds.parse_item_fields(args.item_fields) if args.item_fields else None
    corpus = ds.build_histories(inter, args.min_user_len, args.min_item_freq, ufields, ifields)
    split = ds.split_dataset(corpus.users, ratios, args.prefix_fraction, args.seed)
    out = _out_dir(args.out, args.force)
    ds.save_prepared(corpus, split, out, header="config: " + _echo(args))
    stats = corpus.stats_line()
    with open(os.path.join(out, "stats.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config: {_echo(args)}\n{stats}\n")
        fh.write(f"train={len(split.train_users)} valid={len(split.valid_users)} test={len(split.test_users)} "
                 f"moved_to_train={split.moved_to_train}\n")
    print(stats)
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    data = _load_data(args.data, cfg)
    out = _out_dir(args.out, args.force)
    trainer = Trainer(cfg, data)
    result = trainer.train()
    save_checkpoint(trainer.encoder.store, os.path.join(out, "checkpoint.bin"), cfg.echo(),
                    save_adam=cfg.save_adam_state)
    with open(os.path.join(out, "train.log"), "w", encoding="utf-8") as fh:
        fh.write(f"# config: {cfg.echo()}\n")
        for line in result.log_lines:
            fh.write(line + "\n")
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        for k, v in cfg.to_dict().items():
            fh.write(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}\n")
    print(f"steps={len(result.losses)} best_step={result.best_step} best_valid_recall20={result.best_recall!r}",
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg, data, enc = _load_model(args.data, args.checkpoint)
    ns = [int(n) for n in args.n.split(",")]
    rep = run_eval(enc, data, cfg.channel_config(), ns, which=args.split)
    rep.config = {"train": cfg.to_dict(), "eval": json.loads(_echo(args))}
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(rep.to_json() + "\n")
    table = rep.to_table()
    with open(os.path.splitext(args.out)[0] + ".txt", "w", encoding="utf-8") as fh:
        fh.write(f"# config: {_echo(args)}\n{table}\n")
    print(table, file=sys.stderr)
    return 0


def cmd_retrieve(args) -> int:
    cfg, data, enc = _load_model(args.data, args.checkpoint)
    feats, split = data.features, data.split
    iv = data.corpus.item_vocab
    item_ids = list(feats.all_item_indices())
    item_index = build_index(encode_item_matrix(enc, feats, item_ids), item_ids, "item")
    users = split.eval_users(args.users) if args.users in ("valid", "test") else list(split.train_users)
    hist = [data.histories[u] for u in users]
    reps = encode_user_matrix(enc, feats, users, hist)
    user_index = None
    if args.channel == "u2u":
        pool = list(split.train_users)
        user_index = build_index(encode_user_matrix(enc, feats, pool, [data.histories[u] for u in pool]), pool, "user")
    ch = cfg.channel_config()
    rows: List[str] = []
    for u, e_u, h in zip(users, reps, hist):
        if args.channel == "u2i":
            ranked = retrieve_u2i(e_u, item_index, args.k, set(h))
        elif args.channel == "u2u":
            ranked = retrieve_u2u(e_u, user_index, item_index, data.histories, ch.n_similar, args.k,
                                  query_user=u, seen=set(h), aggregation=ch.aggregation)
        else:
            ranked = retrieve_i2i(e_u, h, item_index, ch.m_per_item, args.k, ch.aggregation)
            ranked = [r for r in ranked if r[0] not in set(h)]
        rows.extend(format_retrieval_rows(u, args.channel, ranked, iv.token))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"# config: {_echo(args)}\n")
        for r in rows:
            fh.write(r + "\n")
    print(f"users={len(users)} rows={len(rows)}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from .experiments import GridResult, SyntheticSpec, run_grid, run_setting, setting_config
    from .evalkit import SETTINGS

    cfg = _config_from(args)
    out = _out_dir(args.out, args.force)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    if args.data:
        data = _load_data(args.data, cfg)
        grid = GridResult()
        for seed in seeds:
            for s in SETTINGS:
                grid.runs.setdefault(s, []).append(run_setting(data, setting_config(cfg.replace(seed=seed), s)))
    else:
        spec = SyntheticSpec(history_len=args.history_len)
        grid = run_grid(cfg, seeds, SETTINGS, spec)
    results = {s: grid.mean_report(s) for s in SETTINGS}
    table = ablation_table(results)
    with open(os.path.join(out, "ablation.md"), "w", encoding="utf-8") as fh:
        fh.write(f"<!-- config: {cfg.echo()} seeds={seeds} -->\n\n{table}")
    with open(os.path.join(out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "seeds": seeds,
                   "settings": {setting_name(s): r.to_dict() for s, r in results.items()}},
                  fh, indent=2, sort_keys=True)
    print(table, file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micrec", description="Cross-channel contrastive two-tower retrieval.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="write a planted-cluster corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--clusters", type=int, default=4)
    s.add_argument("--users-per-cluster", type=int, default=100)
    s.add_argument("--items-per-cluster", type=int, default=100)
    s.add_argument("--in-cluster-prob", type=float, default=0.9)
    s.add_argument("--history-len", type=int, default=20)
    s.add_argument("--keyword-noise", type=float, default=0.5)
    s.add_argument("--field-noise", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="parse, filter and split an interaction log")
    s.add_argument("--interactions", required=True)
    s.add_argument("--user-fields")
    s.add_argument("--item-fields")
    s.add_argument("--format", choices=("tsv", "csv"))
    s.add_argument("--out", required=True)
    s.add_argument("--min-user-len", type=int, default=5)
    s.add_argument("--min-item-freq", type=int, default=5)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--prefix-fraction", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train and write checkpoint + log")
    s.add_argument("--data", required=True, help="prepared directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="flat key = value file")
    s.add_argument("--desk", action="store_true", help="start from the small CPU defaults")
    s.add_argument("--force", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate all channels")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="report JSON path (a .txt table is written alongside)")
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--n", default="20,50")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("retrieve", help="write top-K recommendations for one channel")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--channel", choices=CHANNELS, required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--users", choices=("train", "valid", "test"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("ablate", help="8-setting contrastive grid")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="prepared directory (default: synthetic planted clusters)")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--history-len", type=int, default=8)
    s.add_argument("--config")
    s.add_argument("--desk", action="store_true")
    s.add_argument("--force", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (CommandError, ConfigError, ds.IngestError, ds.EmptyCorpusError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
