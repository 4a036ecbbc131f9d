import json

import pytest

from micrec.cli import main
from micrec.evalkit import parse_ablation_markdown
from micrec.trainer import load_checkpoint

FAST = ["--desk", "--dim", "8", "--hidden-sizes", "16", "--epochs", "2", "--batch-size", "32", "--refresh-every", "5",
        "--num-clusters", "4"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "syn"), "--users-per-cluster", "15", "--items-per-cluster", "15",
                 "--history-len", "6", "--seed", "1"]) == 0
    assert main(["prepare", "--interactions", str(root / "syn/interactions.tsv"),
                 "--user-fields", str(root / "syn/user_fields.tsv"), "--item-fields", str(root / "syn/item_fields.tsv"),
                 "--out", str(root / "prep"), "--min-user-len", "2", "--min-item-freq", "1",
                 "--ratios", "0.6,0.2,0.2"]) == 0
    return root


def test_synth_stats(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--users-per-cluster", "5", "--items-per-cluster", "7",
                 "--history-len", "3"]) == 0
    assert "users=20 items=28 interactions=60" in capsys.readouterr().err


def test_refuses_existing(prepared, capsys):
    assert main(["synth", "--out", str(prepared / "syn")]) == 1
    assert "--force" in capsys.readouterr().err


def test_prepare_toy_counts(tmp_path, capsys):
    p = tmp_path / "toy.tsv"
    p.write_text("a\tx\t1\na\ty\t2\nb\tx\t3\n")
    assert main(["prepare", "--interactions", str(p), "--out", str(tmp_path / "o"), "--min-user-len", "1",
                 "--min-item-freq", "1"]) == 0
    assert capsys.readouterr().out.strip() == "users=2 items=2 interactions=3"
    assert (tmp_path / "o/stats.txt").read_text().startswith("# config: ")


def test_prepare_ingest_error(tmp_path, capsys):
    p = tmp_path / "bad.tsv"
    p.write_text("a\tx\n" * 5)
    assert main(["prepare", "--interactions", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "malformed" in capsys.readouterr().err


def test_missing_checkpoint(prepared, tmp_path, capsys):
    rc = main(["eval", "--data", str(prepared / "prep"), "--checkpoint", str(tmp_path / "none.bin"),
               "--out", str(tmp_path / "r.json")])
    assert rc == 1 and "checkpoint not found" in capsys.readouterr().err


def test_unknown_flag(prepared):
    with pytest.raises(SystemExit):
        main(["train", "--data", str(prepared / "prep"), "--out", "x", "--bogus", "1"])


def test_config_file_and_flag_precedence(prepared, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("dim = 4\nepochs = 0\nhidden_sizes = 8\n")
    out = tmp_path / "run"
    assert main(["train", "--data", str(prepared / "prep"), "--out", str(out), "--config", str(cfg), "--dim", "6"]) == 0
    echo = load_checkpoint(out / "checkpoint.bin").config
    assert echo["dim"] == 6 and echo["epochs"] == 0 and echo["hidden_sizes"] == [8]


def test_train_eval_retrieve_reproducible(prepared, tmp_path):
    d = tmp_path / "run"
    snaps = []
    for _ in range(2):
        assert main(["train", "--data", str(prepared / "prep"), "--out", str(d), "--force"] + FAST) == 0
        assert main(["eval", "--data", str(prepared / "prep"), "--checkpoint", str(d / "checkpoint.bin"),
                     "--out", str(d / "eval.json")]) == 0
        assert main(["retrieve", "--data", str(prepared / "prep"), "--checkpoint", str(d / "checkpoint.bin"),
                     "--channel", "u2i", "--k", "20", "--out", str(d / "u2i.tsv")]) == 0
        snaps.append({f: (d / f).read_bytes() for f in ("checkpoint.bin", "train.log", "u2i.tsv", "eval.json")})
    assert snaps[0] == snaps[1]
    outs = [d]
    assert (outs[0] / "train.log").read_text().startswith("# config: {")
    rows = [l.split("\t") for l in (outs[0] / "u2i.tsv").read_text().splitlines() if not l.startswith("#")]
    per_user = {}
    for r in rows:
        per_user[r[0]] = per_user.get(r[0], 0) + 1
    assert per_user and max(per_user.values()) <= 20 and all(r[1] == "u2i" for r in rows)


@pytest.mark.parametrize("channel", ["u2u", "i2i"])
def test_retrieve_other_channels(prepared, tmp_path, channel):
    d = tmp_path / "run"
    assert main(["train", "--data", str(prepared / "prep"), "--out", str(d), "--desk", "--dim", "8",
                 "--hidden-sizes", "8", "--epochs", "0"]) == 0
    assert main(["retrieve", "--data", str(prepared / "prep"), "--checkpoint", str(d / "checkpoint.bin"),
                 "--channel", channel, "--k", "5", "--out", str(d / "r.tsv")]) == 0
    assert (d / "r.tsv").read_text().count(f"\t{channel}\t") > 0


def test_untrained_near_random(prepared, tmp_path):
    d = tmp_path / "untrained"
    assert main(["train", "--data", str(prepared / "prep"), "--out", str(d), "--desk", "--epochs", "0"]) == 0
    assert main(["eval", "--data", str(prepared / "prep"), "--checkpoint", str(d / "checkpoint.bin"),
                 "--out", str(d / "e.json"), "--n", "20"]) == 0
    rep = json.loads((d / "e.json").read_text())
    # 60 items, prefixes of 5 -> about 20 / 55 of each holdout found at random
    assert abs(rep["metrics"]["u2i"]["20"]["recall"] - 20 / 55) < 0.2
    assert rep["config"]["train"]["epochs"] == 0


def test_ablate(prepared, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(prepared / "prep"), "--out", str(out), "--seeds", "1"] + FAST) == 0
    parsed = parse_ablation_markdown((out / "ablation.md").read_text())
    assert len({s for _, s in parsed}) == 8 and len(parsed) == 24
    assert len(json.loads((out / "ablation.json").read_text())["settings"]) == 8
