"""CLI wiring: subcommands, config overrides, exit codes."""

import numpy as np
import pytest

from nextlvt.cli import run
from nextlvt.config import config_to_text, desk_config
from nextlvt.data import load_ppm, save_ppm
from nextlvt.synth import generate_dataset


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdata")
    train_csv, eval_csv = generate_dataset(root, train_count=24, eval_count=8,
                                           classes=4, side=8, seed=0)
    return train_csv, eval_csv


@pytest.fixture()
def micro_cfg_file(tmp_path):
    text = (
        "image_size = 8\n"
        "patch_size = 4\n"
        "widths = 8\n"
        "stage_ncbs = 1\n"
        "stage_repeats = 1\n"
        "stage_downsample = 0\n"
        "heads = 2\n"
        "pool_strides = 1\n"
        "num_classes = 4\n"
        "precision = float64\n"
    )
    path = tmp_path / "micro.cfg"
    path.write_text(text)
    return path


class TestProfile:
    def test_desk_profile_table(self, capsys, tmp_path):
        cfg_path = tmp_path / "desk.cfg"
        cfg_path.write_text(config_to_text(desk_config()))
        csv_path = tmp_path / "prof.csv"
        assert run(["profile", "--config", str(cfg_path),
                    "--csv", str(csv_path)]) == 0
        out = capsys.readouterr().out
        assert "TOTAL" in out
        assert "1 MAC = 2 FLOP" in out
        assert csv_path.read_text().startswith("layer,params,macs")

    def test_profile_totals_match_library(self, capsys, micro_cfg_file):
        from nextlvt.blocks import build_model
        from nextlvt.config import load_config
        from nextlvt.profiler import count_params
        assert run(["profile", "--config", str(micro_cfg_file)]) == 0
        out = capsys.readouterr().out
        total_line = [ln for ln in out.splitlines() if ln.startswith("TOTAL")][0]
        reported = int(total_line.split()[1])
        model = build_model(load_config(micro_cfg_file))
        assert reported == count_params(model).total_params


class TestGradcheckCommand:
    def test_single_op_passes(self, capsys):
        assert run(["gradcheck", "--op", "softmax", "--bits", "64",
                    "--seeds", "3"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out and "[ok]" in out

    def test_float32_op(self, capsys):
        assert run(["gradcheck", "--op", "conv2d", "--bits", "32",
                    "--seeds", "2"]) == 0


class TestTrainEval:
    def test_one_epoch_writes_one_log_line(self, tmp_path, capsys,
                                           tiny_dataset, micro_cfg_file):
        train_csv, eval_csv = tiny_dataset
        out_dir = tmp_path / "run"
        code = run([
            "train", "--config", str(micro_cfg_file),
            "--train-manifest", str(train_csv),
            "--eval-manifest", str(eval_csv),
            "--out-dir", str(out_dir), "--seed", "0",
            "--set", "epochs=1", "--set", "train_batch=8",
        ])
        assert code == 0
        log_lines = (out_dir / "metrics.log").read_text().strip().splitlines()
        assert len(log_lines) == 1
        assert (out_dir / "best.nlvt").is_file()

    def test_eval_command_prints_accuracy(self, tmp_path, capsys,
                                          tiny_dataset, micro_cfg_file):
        train_csv, eval_csv = tiny_dataset
        out_dir = tmp_path / "run"
        run(["train", "--config", str(micro_cfg_file),
             "--train-manifest", str(train_csv),
             "--eval-manifest", str(eval_csv),
             "--out-dir", str(out_dir), "--seed", "0",
             "--set", "epochs=1", "--set", "train_batch=8"])
        capsys.readouterr()
        code = run(["eval", "--checkpoint", str(out_dir / "best.nlvt"),
                    "--manifest", str(eval_csv), "--batch", "8"])
        assert code == 0
        assert "accuracy:" in capsys.readouterr().out


class TestErrors:
    def test_bad_config_exits_2(self, tmp_path, capsys, tiny_dataset):
        train_csv, _ = tiny_dataset
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("image_size = 33\npatch_size = 4\n")
        code = run(["train", "--config", str(cfg),
                    "--train-manifest", str(train_csv)])
        assert code == 2
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and "does not divide" in err

    def test_unknown_config_key_exits_2(self, tmp_path, capsys, tiny_dataset):
        train_csv, _ = tiny_dataset
        code = run(["train", "--train-manifest", str(train_csv),
                    "--set", "bogus=1"])
        assert code == 2

    def test_missing_file_exits_3(self, capsys):
        code = run(["eval", "--checkpoint", "/nonexistent/x.nlvt",
                    "--manifest", "/nonexistent/m.csv"])
        assert code == 3
        assert capsys.readouterr().err.count("\n") == 1


class TestAugmixPreviewAndSynth:
    def test_preview_writes_requested_count(self, tmp_path, capsys, rng):
        src = tmp_path / "src.ppm"
        save_ppm(src, rng.uniform(0, 1, (3, 8, 8)))
        out_dir = tmp_path / "aug"
        code = run(["augmix-preview", "--image", str(src),
                    "--out-dir", str(out_dir), "--count", "3", "--seed", "1"])
        assert code == 0
        files = sorted(out_dir.glob("*.ppm"))
        assert len(files) == 3
        for f in files:
            img = load_ppm(f)
            assert img.shape == (3, 8, 8)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_synth_writes_manifests(self, tmp_path, capsys):
        out_dir = tmp_path / "ds"
        code = run(["synth", "--out-dir", str(out_dir), "--classes", "4",
                    "--train-count", "8", "--eval-count", "4", "--side", "8",
                    "--seed", "0"])
        assert code == 0
        assert (out_dir / "train.csv").is_file()
        assert (out_dir / "eval.csv").is_file()
        assert len(list((out_dir / "train").glob("*.ppm"))) == 8


class TestDeterminism:
    def test_same_argv_same_outputs(self, tmp_path, tiny_dataset,
                                    micro_cfg_file, capsys):
        train_csv, eval_csv = tiny_dataset
        logs = []
        for name in ("a", "b"):
            out_dir = tmp_path / name
            run(["train", "--config", str(micro_cfg_file),
                 "--train-manifest", str(train_csv),
                 "--eval-manifest", str(eval_csv),
                 "--out-dir", str(out_dir), "--seed", "5",
                 "--set", "epochs=2", "--set", "train_batch=8"])
            logs.append((out_dir / "metrics.log").read_text())
        assert logs[0] == logs[1]
