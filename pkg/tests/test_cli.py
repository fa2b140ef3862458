import csv
import hashlib
import json
import os

import numpy as np
import pytest

from cqvae import cli, data

TINY = ["--M", "4", "--N", "5", "--batch", "4", "--set", "encoder_channels=4,8", "--set", "decoder_widths=16",
        "--set", "shape_encoder_widths=16", "--set", "eval_l_max=6", "--set", "eval_k_max=4",
        "--set", "warmup_steps=2", "--set", "n_heatmaps=2"]


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert cli.main(["generate", "--out", str(out), "--scenes", "10", "--J", "16", "--H", "16", "--W", "16",
                     "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "r"
    assert cli.main(["train", "--data", str(tiny_data), "--run", str(run), "--epochs", "2", *TINY]) == 0
    return run


def test_no_command_is_usage_error(capsys):
    assert cli.main([]) == cli.EXIT_USAGE


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == cli.EXIT_USAGE


def test_missing_dataset_is_data_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--run", str(tmp_path / "r")]) == cli.EXIT_DATA


def test_bad_checkpoint_is_data_error(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_unknown_config_key_is_usage_error(tmp_path):
    assert cli.main(["train", "--data", "x", "--run", "y", "--set", "bogus=1"]) == cli.EXIT_USAGE


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_exit_code(tiny_data, tmp_path):
    run = tmp_path / "div"
    code = cli.main(["train", "--data", str(tiny_data), "--run", str(run), "--epochs", "1", *TINY,
                     "--set", "shape_scale=1e30"])
    assert code == cli.EXIT_DIVERGED
    assert (run / "last_good.ckpt").exists()


def test_generate_split_and_manifest_hash(tmp_path):
    args = ["--scenes", "100", "--J", "16", "--H", "16", "--W", "16", "--seed", "5"]
    assert cli.main(["generate", "--out", str(tmp_path / "a"), *args]) == 0
    assert cli.main(["generate", "--out", str(tmp_path / "b"), *args]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    splits = [r["split"] for r in manifest["records"]]
    assert splits.count("train") == 80 and splits.count("test") == 20
    assert sha(tmp_path / "a" / "manifest.json") == sha(tmp_path / "b" / "manifest.json")


def test_generate_sweep_and_augment(tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["generate", "--out", str(out), "--scenes", "30", "--J", "16", "--H", "16", "--W", "16",
                     "--augment", "40", "--sweep"]) == 0
    assert "mean var(gt)" in capsys.readouterr().out
    with open(out / "ambiguity_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["ambiguity"]) for r in rows] == [0.5, 1.0, 2.0]
    means = [float(r["mean_var_gt"]) for r in rows]
    assert means == sorted(means)
    train, manifest = data.read_dataset(out, "train")
    assert len(train) == 40 and manifest["ssm_explained"] >= 0.8


def test_train_writes_run_directory(tiny_run):
    for name in ("config.txt", "VERSION", "checkpoint.ckpt", "metrics.csv"):
        assert (tiny_run / name).exists()
    with open(tiny_run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and list(rows[0])[:4] == ["epoch", "step", "tau", "loss"]
    assert "M = 4" in (tiny_run / "config.txt").read_text()


def test_resume_continues_the_run(tiny_data, tiny_run, tmp_path):
    run = tmp_path / "more"
    assert cli.main(["train", "--data", str(tiny_data), "--run", str(run), "--epochs", "3",
                     "--resume", str(tiny_run / "checkpoint.ckpt"), *TINY]) == 0
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]


def test_sample_is_reproducible(tiny_run, tmp_path):
    ckpt = str(tiny_run / "checkpoint.ckpt")
    for name in ("a", "b"):
        assert cli.main(["sample", "--checkpoint", ckpt, "--out", str(tmp_path / name), "--count", "1",
                         "--seed", "4"]) == 0
    assert sha(tmp_path / "a" / "shape_0000.csv") == sha(tmp_path / "b" / "shape_0000.csv")


def test_random_codes_decode_to_distinct_shapes(tiny_run, tmp_path):
    out = tmp_path / "many"
    assert cli.main(["sample", "--checkpoint", str(tiny_run / "checkpoint.ckpt"), "--out", str(out),
                     "--count", "100", "--seed", "1"]) == 0
    shapes = [data.read_shape_csv(out / f"shape_{i:04d}.csv") for i in range(100)]
    keys = {s.tobytes() for s in shapes}
    assert len(keys) >= 90
    assert (out / "overlay.png").exists()


def test_sample_for_a_record(tiny_data, tiny_run, tmp_path):
    rid = json.loads((tiny_data / "manifest.json").read_text())["records"][0]["id"]
    assert cli.main(["sample", "--checkpoint", str(tiny_run / "checkpoint.ckpt"), "--out", str(tmp_path / "o"),
                     "--image", rid, "--data", str(tiny_data), "--count", "3"]) == 0
    assert len(list((tmp_path / "o").glob("shape_*.csv"))) == 3
    assert cli.main(["sample", "--checkpoint", str(tiny_run / "checkpoint.ckpt"), "--out", str(tmp_path / "p"),
                     "--image", "nope", "--data", str(tiny_data)]) == cli.EXIT_DATA


def test_evaluate_outputs(tiny_data, tiny_run, tmp_path, capsys):
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.ckpt"), "--data", str(tiny_data),
                     "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["correlations"]) == 4 and summary["n_images"] == 2
    assert len(list((out / "heatmaps").glob("*.png"))) == 4
    assert "corr(var_model,var_gt)" in capsys.readouterr().out


def test_evaluate_ensemble(tiny_data, tiny_run, tmp_path):
    out = tmp_path / "ens"
    assert cli.main(["evaluate", "--checkpoint", str(tiny_run / "checkpoint.ckpt"), "--data", str(tiny_data),
                     "--out", str(out), "--seeds", "2"]) == 0
    summary = json.loads((out / "ensemble.json").read_text())
    assert summary["seeds"] == 2 and summary["mean_var_pooled"] >= 0
    assert (out / "seed_1" / "checkpoint.ckpt").exists()


def test_cqae_command(tmp_path):
    run = tmp_path / "ae"
    assert cli.main(["cqae", "--run", str(run), "--images", "16", "--epochs", "2",
                     "--set", "cqae_channels=4,8"]) == 0
    assert (run / "random_samples.png").exists()
    assert cli.main(["sample", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(tmp_path / "g"),
                     "--count", "4"]) == 0
    img = data.read_image_f32(tmp_path / "g" / "image_0000.f32", 16, 16)
    assert np.all((img >= 0) & (img <= 1))


def test_version_string():
    v = cli.version_string()
    assert v.startswith("cqvae ")
    assert os.linesep not in v
