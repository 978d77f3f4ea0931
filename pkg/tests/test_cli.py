import csv
import json

import numpy as np
import pytest

from bcp_lab.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from bcp_lab.datakit import DatasetManifest, load_volume, save_volume
from bcp_lab.segnet import NetConfig, init_params, load_checkpoint, save_checkpoint

RUN_CONFIG = {
    "net": {"num_classes": 3, "base_width": 4, "depth": 2},
    "pretrain_iters": 2,
    "selftrain_iters": 2,
    "batch_labeled": 2,
    "batch_unlabeled": 2,
    "log_every": 1,
    "val_limit": 1,
}


def _lab(*args) -> int:
    return main(["bcp-lab"] + [str(a) for a in args])


def _error_line(capsys) -> str:
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("bcp-lab: error")]
    assert len(lines) == 1
    return lines[0]


@pytest.fixture(scope="module")
def run_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(RUN_CONFIG))
    return path


@pytest.fixture(scope="module")
def trained_run(tiny_dataset, run_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "bcp"
    assert _lab("train", "--config", run_config, "--data", tiny_dataset.root, "--out", out) == EXIT_OK
    return out


def test_gen_data(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_labeled": 2, "n_unlabeled": 2, "n_val": 0, "n_test": 1, "shape": [16, 16]}))

    assert _lab("gen-data", "--spec", spec, "--seed", 4, "--shift", 0.5, "--out", tmp_path / "d") == EXIT_OK

    manifest = DatasetManifest.load(tmp_path / "d")
    assert manifest.spec["seed"] == 4
    assert manifest.spec["shift"] == 0.5
    assert len(manifest.split("test")) == 1


def test_gen_data_malformed_spec(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text("{oops")
    assert _lab("gen-data", "--spec", spec, "--out", tmp_path / "d") == EXIT_DATA
    assert "kind=data" in _error_line(capsys)


def test_train_writes_run_directory(trained_run):
    for name in ("config.json", "pretrained.ckpt", "final.ckpt", "metrics.csv"):
        assert (trained_run / name).exists()

    snapshot = json.loads((trained_run / "config.json").read_text())
    assert snapshot["command"] == "train"
    assert snapshot["train_config"]["selftrain_iters"] == 2
    assert load_checkpoint(trained_run / "final.ckpt").iteration == 2


def test_pretrain_command(tiny_dataset, run_config, tmp_path):
    out = tmp_path / "pre"
    assert _lab("pretrain", "--config", run_config, "--data", tiny_dataset.root, "--out", out, "--pretrain", "plain") == EXIT_OK
    assert set(load_checkpoint(out / "pretrained.ckpt").groups) == {"student"}


def test_eval_command(tiny_dataset, trained_run, tmp_path):
    out = tmp_path / "eval.csv"
    assert _lab("eval", "--checkpoint", trained_run / "final.ckpt", "--data", tiny_dataset.root, "--out", out) == EXIT_OK

    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 * 2
    assert {r["class"] for r in rows} == {"1", "2"}
    assert all(0.0 <= float(r["dice"]) <= 1.0 for r in rows)


def test_diagnose_command(tiny_dataset, trained_run, tmp_path):
    out = tmp_path / "diag.csv"
    args = ("diagnose", "--checkpoint", trained_run / "final.ckpt", "--data", tiny_dataset.root, "--out", out)
    assert _lab(*args) == EXIT_OK
    assert out.read_text().splitlines()[0] == "class,kde_gap,dice_labeled,dice_unlabeled"


def test_predict_command(tiny_dataset, trained_run, tmp_path):
    image = tiny_dataset.root / tiny_dataset.split("test")[0].image
    out = tmp_path / "pred.json"
    assert _lab("predict", "--checkpoint", trained_run / "final.ckpt", "--input", image, "--out", out) == EXIT_OK

    labels = load_volume(out, expect_dtype="u8")
    assert labels.shape == (16, 16)
    assert labels.max() < 3


def test_plot_commands(tiny_dataset, trained_run, tmp_path):
    assert _lab("plot", "--metrics", trained_run / "metrics.csv", "--out", tmp_path / "m.svg") == EXIT_OK
    assert _lab("plot", "--data", tiny_dataset.root, "--class", 2, "--out", tmp_path / "k.svg") == EXIT_OK
    assert "<svg" in (tmp_path / "k.svg").read_text()


def test_plot_needs_a_source(tmp_path, capsys):
    assert _lab("plot", "--out", tmp_path / "x.svg") == EXIT_USAGE
    assert "kind=usage" in _error_line(capsys)


def test_mask_command(tmp_path):
    out = tmp_path / "mask.json"
    assert _lab("mask", "--shape", "6x6", "--beta", 0.5, "--out", out) == EXIT_OK

    bits = load_volume(out, expect_dtype="u8")
    assert bits.shape == (6, 6)
    assert (bits == 0).sum() == 9
    assert not bits[2:4, 2:4].any()


def test_mask_bad_beta(tmp_path, capsys):
    assert _lab("mask", "--beta", 1.5, "--out", tmp_path / "m.json") == EXIT_USAGE
    line = _error_line(capsys)
    assert line.startswith("bcp-lab: error code=2 kind=usage message=")
    assert "beta" in line


def test_mask_bad_shape(tmp_path):
    assert _lab("mask", "--shape", "6by6", "--out", tmp_path / "m.json") == EXIT_USAGE


def test_missing_checkpoint(tiny_dataset, tmp_path, capsys):
    code = _lab("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", tiny_dataset.root, "--out", tmp_path / "e.csv")
    assert code == EXIT_DATA
    assert _error_line(capsys).startswith("bcp-lab: error code=3 kind=data message=")


def test_missing_dataset(tmp_path, run_config):
    assert _lab("train", "--config", run_config, "--data", tmp_path / "empty", "--out", tmp_path / "r") == EXIT_DATA


def test_conflicting_mixer_flags(tiny_dataset, run_config, tmp_path):
    args = ("train", "--config", run_config, "--data", tiny_dataset.root, "--out", tmp_path / "r", "--no-bcp", "--mixer", "mixup")
    assert _lab(*args) == EXIT_USAGE


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        _lab("bogus-command")
    assert info.value.code == 2


def test_help_exits_0(capsys):
    with pytest.raises(SystemExit) as info:
        _lab("--help")
    assert info.value.code == 0
    assert "gen-data" in capsys.readouterr().out


def test_ablate_list(capsys):
    assert _lab("ablate", "--list") == EXIT_OK
    out = capsys.readouterr().out
    assert "cp-in" in out and "supervised" in out


def test_ablate_runs_arm(tiny_dataset, run_config, tmp_path):
    args = ("ablate", "--arm", "supervised", "--config", run_config, "--data", tiny_dataset.root, "--out", tmp_path)
    assert _lab(*args) == EXIT_OK
    assert (tmp_path / "supervised" / "final.ckpt").exists()
    assert (tmp_path / "supervised" / "eval.csv").exists()

    assert _lab("ablate", "--arm", "nope", "--data", tiny_dataset.root, "--out", tmp_path) == EXIT_USAGE


def test_resume_flag(tiny_dataset, tmp_path):
    cfg = dict(RUN_CONFIG, checkpoint_every=1, selftrain_iters=3)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))

    first = tmp_path / "first"
    assert _lab("train", "--config", path, "--data", tiny_dataset.root, "--out", first) == EXIT_OK
    resumed = tmp_path / "resumed"
    args = ("train", "--config", path, "--data", tiny_dataset.root, "--out", resumed, "--resume", first / "state-000002.ckpt")
    assert _lab(*args) == EXIT_OK

    a = load_checkpoint(first / "final.ckpt").params("student")
    b = load_checkpoint(resumed / "final.ckpt").params("student")
    assert a.equals(b)
    assert load_checkpoint(resumed / "final.ckpt").iteration == 3


def _checkpoint(path, **net):
    cfg = NetConfig(**dict(dict(num_classes=3, base_width=4, depth=2), **net))
    save_checkpoint(path, {"student": init_params(cfg)}, cfg)
    return path


@pytest.mark.parametrize("net, what", [(dict(in_channels=2), "channels"), (dict(num_classes=2), "classes")])
@pytest.mark.parametrize("command", ["eval", "diagnose"])
def test_checkpoint_not_fitting_dataset(tiny_dataset, tmp_path, capsys, net, what, command):
    ckpt = _checkpoint(tmp_path / "other.ckpt", **net)
    args = (command, "--checkpoint", ckpt, "--data", tiny_dataset.root, "--out", tmp_path / "out.csv")

    assert _lab(*args) == EXIT_DATA
    line = _error_line(capsys)
    assert "kind=data" in line and what in line
    assert not (tmp_path / "out.csv").exists()


def test_predict_indivisible_input(tmp_path, capsys):
    ckpt = _checkpoint(tmp_path / "deep.ckpt", depth=3)
    image = tmp_path / "img.json"
    save_volume(image, np.zeros((10, 10), dtype=np.float32), "f32")

    assert _lab("predict", "--checkpoint", ckpt, "--input", image, "--out", tmp_path / "p.json") == EXIT_DATA
    assert "divisible by 4" in _error_line(capsys)


@pytest.mark.parametrize("doc, field_name", [({"seed": "abc"}, "seed"), ({"use_lcc": "no"}, "use_lcc")])
def test_mistyped_run_config(tiny_dataset, tmp_path, capsys, doc, field_name):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(dict(RUN_CONFIG, **doc)))

    assert _lab("train", "--config", path, "--data", tiny_dataset.root, "--out", tmp_path / "r") == EXIT_DATA
    line = _error_line(capsys)
    assert "kind=data" in line and f"`{field_name}`" in line


def test_gen_data_value_errors(tmp_path, capsys):
    assert _lab("gen-data", "--shift", 1.5, "--out", tmp_path / "a") == EXIT_USAGE
    assert "kind=usage" in _error_line(capsys)

    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"shift": 1.5}))
    assert _lab("gen-data", "--spec", spec, "--out", tmp_path / "b") == EXIT_DATA
    assert "shift" in _error_line(capsys)

    spec.write_text(json.dumps({"n_labeled": "4"}))
    assert _lab("gen-data", "--spec", spec, "--out", tmp_path / "c") == EXIT_DATA
    assert "`n_labeled`" in _error_line(capsys)
