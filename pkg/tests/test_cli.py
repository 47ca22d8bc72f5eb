import argparse
import csv

import numpy as np
import pytest

from semimatch import cli, data
from semimatch.trainer import RunConfig

TINY = [
    "--epochs", "1",
    "--n-train", "6",
    "--n-val", "2",
    "--n-test", "2",
    "--batch-size", "3",
    "--label-fraction", "0.5",
    "--channels", "4,6",
    "--strides", "4,2",
    "--agg-hidden", "2",
    "--warmup", "0",
    "--dtype", "float64",
]  # fmt: skip


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    assert cli.main(["synth", "--out", str(root), "--n-train", "6", "--n-val", "2", "--n-test", "3"]) == 0
    return root / "manifest.jsonl"


def write_predictions(path, records, offset=0.0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "index", "x", "y"])
        for r in records:
            for i, (x, y) in enumerate(r.source_keypoints):
                w.writerow([r.pair_id, i, x + offset, y])


def test_synth_writes_manifest(bench):
    recs = data.load_manifest(bench)
    assert [sum(r.split == s for r in recs) for s in data.SPLITS] == [6, 2, 3]


def test_eval_of_ground_truth_is_perfect(bench, tmp_path, capsys):
    recs = [r for r in data.load_manifest(bench) if r.split == "test"]
    write_predictions(tmp_path / "p.csv", recs)
    assert cli.main(["eval", "--manifest", str(bench), "--predictions", str(tmp_path / "p.csv"), "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "PCK@0.1 = 100.00" in out and "PCK@0.05 = 100.00" in out
    assert (tmp_path / "r" / "summary.csv").exists() and (tmp_path / "r" / "per_class.csv").exists()
    # an 8 pixel shift on 64 pixel images fails 0.1 (6.4) but passes 0.15 (9.6)
    write_predictions(tmp_path / "q.csv", recs, offset=8.0)
    cli.main(["eval", "--manifest", str(bench), "--predictions", str(tmp_path / "q.csv")])
    out = capsys.readouterr().out
    assert "PCK@0.1 = 0.00" in out and "PCK@0.15 = 100.00" in out


def test_eval_missing_predictions_or_source(bench, tmp_path, capsys):
    recs = [r for r in data.load_manifest(bench) if r.split == "test"]
    write_predictions(tmp_path / "p.csv", recs[:1])
    assert cli.main(["eval", "--manifest", str(bench), "--predictions", str(tmp_path / "p.csv")]) == 2
    assert cli.main(["eval", "--manifest", str(bench)]) == 2


def test_bad_flags_exit_2(capsys):
    assert cli.main(["train", "--epochs", "many"]) == 2
    assert cli.main(["train", "--no-such-flag"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--warmup", "3"]) == 2
    err = capsys.readouterr().err
    assert "warmup" in err


def test_config_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("epochs = 7\nlr = 0.01\noutput_dir = from_file\n")
    parser = cli.build_parser()
    monkeypatch.setenv(cli.ENV_OUTPUT, "from_env")
    args = parser.parse_args(["train", "--config", str(cfg_file), "--epochs", "3"])
    cfg = cli.resolve_config(args)
    assert (cfg.epochs, cfg.lr, cfg.output_dir) == (3, 0.01, "from_file")
    cfg = cli.resolve_config(parser.parse_args(["train"]))
    assert cfg.output_dir == "from_env" and cfg.epochs == RunConfig().epochs


def test_ablation_tags():
    parser = cli.build_parser()
    args = parser.parse_args(["ablate", "--drop-mask", "thres", "--drop-mask", "fb", "--seeds", "0,1"])
    configs = cli.ablation_configs(cli.resolve_config(args), args)
    assert [(c.tag, c.seed) for c in configs] == [
        ("full", 0), ("full", 1), ("w/o M_thres", 0), ("w/o M_thres", 1), ("w/o M_fb", 0), ("w/o M_fb", 1)
    ]  # fmt: skip
    assert not configs[2].use_thres and configs[2].use_fb
    args = parser.parse_args(["ablate", "--label-fractions", "0.1,0.3"])
    modes = [(c.tag, c.mode) for c in cli.ablation_configs(cli.resolve_config(args), args)]
    assert ("supervised@0.1", "supervised") in modes and ("semi@0.3", "semi") in modes


def test_train_twice_gives_identical_logs(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["train", *TINY, "--output-dir", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert "config_hash=" in capsys.readouterr().out


def test_checkpoint_eval_plot_and_masks(tmp_path, bench, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", *TINY, "--output-dir", str(run)]) == 0
    assert cli.main(["eval", "--manifest", str(bench), "--checkpoint", str(run / "best")]) == 0
    assert "PCK@0.1 =" in capsys.readouterr().out
    assert cli.main(["plot", str(run / "train_log.csv"), "--out", str(tmp_path / "c.png")]) == 0
    assert (tmp_path / "c.png").stat().st_size > 0
    dump = tmp_path / "m.dump"
    assert cli.main(["dump-masks", "--checkpoint", str(run / "best"), "--count", "2", "--out", str(dump), "--png", str(tmp_path / "m.png")]) == 0
    from semimatch.numerics import load_archive

    planes = load_archive(dump)
    assert len(planes) == 2 and all(p.shape[0] == 4 for p in planes.values())
    assert np.all(planes["sample0.planes"] >= 0)


def test_ablate_runs_and_reports(tmp_path, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", *TINY, "--drop-mask", "thres", "--output-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "w/o M_thres:" in text and "full:" in text
    with open(out / "ablation.csv") as fh:
        assert {r["group"] for r in csv.DictReader(fh)} == {"full", "w/o M_thres"}


def test_typed_flag_names_its_type():
    assert cli._typed("epochs").__name__ == "int"
    with pytest.raises(argparse.ArgumentTypeError):
        cli._typed("use_fb")("maybe")
