"""End-to-end command-line runs on tiny models and datasets."""
import json

import pytest

from orthoprune.cli import main
from orthoprune.config import parse_config_text
from orthoprune.importance import l1_importance
from orthoprune.models import build_model, load_model, save_model
from orthoprune.pruning import apply_plan, make_plan

TINY = """
[model]
family = plain
widths = 4
classes = 3
in_channels = 1
[data]
train_per_class = 8
val_per_class = 4
image_hw = 8
[train]
epochs = 1
batch_size = 8
lr = 1e-3
[prune]
target = 0.3
rounds = 1
retrain_epochs = 1
retrain_lr = 1e-3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_init_config(tmp_path, capsys):
    path = tmp_path / "defaults.ini"
    assert main(["init-config", "-o", str(path)]) == 0
    cfg = parse_config_text(path.read_text())
    assert cfg.get("model", "family") == "plain"
    assert str(path) in capsys.readouterr().out


def test_train_end_to_end(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "-c", str(tiny_config), "-o", str(out)]) == 0
    for name in ("model.bin", "checkpoint.bin", "training.csv", "manifest.json"):
        assert (out / name).exists(), name
    model, _, meta = load_model(out / "model.bin")
    assert meta["kind"] == "trained"
    assert model.to_topology()["family"] == "plain"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["outputs"]["model"] == "model.bin"
    stdout = capsys.readouterr().out
    assert "trained plain for 1 epochs" in stdout
    assert "val_acc=" in stdout


def test_train_resume_continues(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "-c", str(tiny_config), "-o", str(out)]) == 0
    # same checkpoint, two more epochs on top of the finished one
    assert (
        main(
            ["train", "-c", str(tiny_config), "-o", str(out), "--set", "train.epochs=3", "--resume"]
        )
        == 0
    )
    lines = (out / "training.csv").read_text().strip().splitlines()
    # header + epoch 0 + appended epochs 1 and 2
    assert len(lines) == 4


def test_config_error_exits_2(tiny_config, tmp_path, capsys):
    code = main(
        ["train", "-c", str(tiny_config), "-o", str(tmp_path / "x"), "--set", "train.lr=-1"]
    )
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert "train.lr" in err
    assert "\n" not in err.strip()


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["train", "-c", str(tmp_path / "ghost.ini"), "-o", str(tmp_path / "x")]) == 2
    assert "cannot read configuration file" in capsys.readouterr().err


def test_prune_end_to_end(tiny_config, tmp_path, capsys):
    out = tmp_path / "pruned"
    assert main(["prune", "-c", str(tiny_config), "-o", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["rounds"]) == 1
    assert report["rounds"][0]["units_after"] < report["rounds"][0]["units_before"]
    assert 0.0 < report["achieved_survival"] < 1.0
    assert report["compression"]["params_original"] > report["compression"]["params_pruned"]
    model, _, meta = load_model(out / "pruned.bin")
    assert meta["kind"] == "pruned"
    assert "compression=" in capsys.readouterr().out


def test_ebt_end_to_end(tiny_config, tmp_path, capsys):
    out = tmp_path / "ebt"
    code = main(
        [
            "ebt", "-c", str(tiny_config), "-o", str(out),
            "--threshold", "0.5", "--patience", "1",
            "--set", "train.epochs=3", "--set", "train.lr=1e-4",
            "--set", "prune.metric=l1",
        ]
    )
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["found_epoch"] >= 0
    assert report["epochs_trained"] <= 3
    plan = json.loads((out / "plan.json").read_text())
    assert plan["victims"]
    assert (out / "ticket.bin").exists()
    assert "ticket found at epoch" in capsys.readouterr().out


def test_exp_reliability(tiny_config, tmp_path, capsys):
    out = tmp_path / "rel"
    code = main(
        [
            "exp-reliability", "-c", str(tiny_config), "-o", str(out),
            "--group-size", "2", "--groups", "8",
        ]
    )
    assert code == 0
    payload = json.loads((out / "reliability.json").read_text())
    assert payload["groups"] == 8
    assert payload["group_size"] == 2
    assert len(payload["estimates"]) == 8
    assert "reliability r=" in capsys.readouterr().out


def test_exp_parcorr_and_gram(tiny_config, tmp_path, capsys):
    out = tmp_path / "pc"
    assert main(["exp-parcorr", "-c", str(tiny_config), "-o", str(out)]) == 0
    stats = json.loads((out / "parcorr.json").read_text())
    assert "conv0_0" in stats
    assert 0.0 <= stats["conv0_0"]["median_abs"] <= 1.0

    out2 = tmp_path / "gram"
    assert main(["exp-gram", "-c", str(tiny_config), "-o", str(out2)]) == 0
    gram = json.loads((out2 / "gram.json").read_text())
    assert gram["conv0_0"]["filters"] == 4
    stdout = capsys.readouterr().out
    assert "median|pcorr|" in stdout and "mean|cos|" in stdout


def test_exp_uses_saved_model(tiny_config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "-c", str(tiny_config), "-o", str(run)]) == 0
    out = tmp_path / "rel"
    code = main(
        [
            "exp-reliability", "-c", str(tiny_config), "-o", str(out),
            "--model", str(run / "model.bin"), "--group-size", "2", "--groups", "5",
        ]
    )
    assert code == 0
    assert json.loads((out / "reliability.json").read_text())["groups"] == 5


def test_report_between_saved_models(tmp_path, capsys):
    model = build_model("plain", [4], classes=3, in_channels=1, seed=0)
    save_model(tmp_path / "a.bin", model)
    table = l1_importance(model)
    pruned = apply_plan(model, make_plan(model, table, 0.4))
    save_model(tmp_path / "b.bin", pruned)
    code = main(
        [
            "report", "--original", str(tmp_path / "a.bin"), "--pruned", str(tmp_path / "b.bin"),
            "--height", "8", "--width", "8",
        ]
    )
    assert code == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["compression_ratio"] > 1.0
    assert 0.0 < rep["flops_reduction"] < 1.0


def test_report_missing_file_exits_1(tmp_path, capsys):
    code = main(
        ["report", "--original", str(tmp_path / "no.bin"), "--pruned", str(tmp_path / "no.bin")]
    )
    assert code == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("[ok]") == 4
    assert "worst=" in out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "orthoprune" in capsys.readouterr().out
