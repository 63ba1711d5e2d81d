import csv
import filecmp
import json
import os
import subprocess
import sys

import pytest

from polypnext.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RUN_MANIFEST, build_parser, main

TINY = [
    "--set", "model.encoder={stage_depths: [1, 1, 1], stage_channels: [8, 16, 32]}",
    "--set", "model.input_size=32",
    "--set", "model.frames=3",
    "--set", "train.folds=2",
    "--set", "train.batch_size=2",
    "--set", "train.epochs=1",
    "--set", "train.eval_batch_size=2",
    "--set", "train.lr=0.001",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--clips", "4", "--frames", "6", "--size", "64", "--seed", "1"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--fold", "0", "--max-steps", "3", *TINY]) == EXIT_OK
    return out


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--clips", "2", "--frames", "10", "--size", "256", "--seed", "7"]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b", ignore=[RUN_MANIFEST])
    assert not cmp.left_only and not cmp.right_only and not cmp.diff_files
    assert json.loads((tmp_path / "a" / RUN_MANIFEST).read_text())["seed"] == 7


def test_synth_small_size(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--size", "32"]) == EXIT_USAGE
    assert "64" in capsys.readouterr().err


def test_synth_refuses_nonempty_dir(tmp_path):
    (tmp_path / "x").write_text("keep")
    assert main(["synth", "--out", str(tmp_path), "--size", "64"]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path), "--size", "64", "--force"]) == EXIT_OK


def test_synth_default_seed():
    args = build_parser().parse_args(["synth", "--out", "x"])
    assert args.seed == 0


def test_train_outputs(trained):
    assert (trained / "fold0" / "final.npz").exists()
    assert (trained / "fold0" / "loss_curve.csv").exists()
    assert (trained / "fold0" / "loss_curve.png").exists()
    assert not (trained / "fold1").exists()
    rows = list(csv.reader(open(trained / "cv_summary.csv")))
    assert rows[0] == ["fold", "n_val_clips", "dice", "iou", "hd95", "recall"] and rows[1][0] == "0"
    manifest = json.loads((trained / RUN_MANIFEST).read_text())
    assert set(manifest) == {"command", "config_hash", "seed", "timestamp", "source_revision", "hardware"}
    assert sum(1 for p in trained.rglob(RUN_MANIFEST)) == 1


def test_train_fold_out_of_range(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--fold", "6"]) == EXIT_USAGE
    assert "--fold 6" in capsys.readouterr().err


def test_train_invalid_config_key(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  lerning_rate: 0.1\n")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == EXIT_USAGE
    assert "train.lerning_rate" in capsys.readouterr().err


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_train_non_finite_exit_code(dataset, tmp_path):
    argv = ["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--fold", "0", *TINY, "--set", "train.lr=.inf"]
    assert main(argv) == EXIT_NUMERIC


def test_eval_checkpoint(trained, dataset, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--split", "hard_unseen", "--ckpt", str(trained / "fold0" / "final.npz"), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} >= {"metrics.csv", "metrics.json", "metrics.md", RUN_MANIFEST}


def test_eval_config_mismatch(trained, dataset, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  fusion_variant: mha\n")
    argv = ["eval", "--data", str(dataset), "--split", "easy_unseen", "--ckpt", str(trained / "fold0" / "final.npz"),
            "--config", str(cfg), "--out", str(tmp_path / "ev")]
    assert main(argv) == EXIT_USAGE


def test_eval_oracle(dataset, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--split", "easy_unseen", "--oracle", "--out", str(out)]) == 0
    agg = json.loads((out / "metrics.json").read_text())["aggregate"]
    assert agg == {"dice": 1.0, "iou": 1.0, "hd95": 0.0, "recall": 1.0}


def test_eval_unknown_split(dataset, tmp_path, capsys):
    assert main(["eval", "--data", str(dataset), "--split", "seen", "--oracle", "--out", str(tmp_path)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert all(s in err for s in ("train", "easy_unseen", "hard_unseen"))


def test_bench(trained, tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "--ckpt", str(trained / "fold0" / "final.npz"), "--trials", "10", "--warmup", "3", "--out", str(out)]) == 0
    res = json.loads((out / "bench.json").read_text())
    assert res["fps_median"] > 0 and "fps_iqr" in res and res["hardware"]
    assert (out / "bench.md").exists() and (out / "bench_latency.png").exists()


def test_ablate_rejects_zero_frames(dataset, tmp_path):
    assert main(["ablate", "--data", str(dataset), "--frames", "0", "--out", str(tmp_path / "a")]) == EXIT_USAGE


def test_ablate(dataset, tmp_path):
    out = tmp_path / "a"
    assert main(["ablate", "--data", str(dataset), "--frames", "1,3", "--out", str(out), "--max-steps", "2", *TINY]) == 0
    assert len(list(csv.reader(open(out / "ablation.csv")))) == 1 + 2 * 4
    assert (out / "ablation.png").exists() and (out / RUN_MANIFEST).exists()


@pytest.mark.parametrize("sub", ["synth", "train", "eval", "bench", "ablate"])
def test_help_lists_defaults(sub):
    env = {**os.environ, "COLUMNS": "400"}
    out = subprocess.run([sys.executable, "-m", "polypnext", sub, "--help"], capture_output=True, text=True,
                         check=True, env=env).stdout
    sub_parser = build_parser()._subparsers._group_actions[0].choices[sub]
    # join each option's help block; long metavars push the help onto the next line
    blocks, current = {}, None
    for ln in out.splitlines():
        if ln.startswith("  -"):
            current = ln.split()[0].rstrip(",")
            blocks[current] = ln
        elif current and ln.startswith("    "):
            blocks[current] += " " + ln.strip()
    for action in sub_parser._actions:
        if action.dest != "help":
            assert f"(default: {action.default})" in blocks[action.option_strings[0]]
