"""
命令行入口单元测试：退出码、输出文件与可复现性
"""

import csv
import json

import pytest

from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY_TOML = """
seed = 0
log_level = "WARNING"

[encoder]
image_height = 16
image_width = 8
patch_size = 4
embed_dim = {embed_dim}
depth = 1
heads = 2
dropout_rate = 0.0

[fusion]
mc_passes = 4

[optim]
lr_preset = "custom"
lr = 1e-3
epochs = {epochs}
identities_per_batch = 3
instances_per_identity = 2

[data.synth]
n_identities = 6
samples_per_identity = 5
image_height = 16
image_width = 8
n_cameras = 2

[data.augment]
padding = 2

[evaluation]
exclusion = "none"
batch_size = 16
"""


def write_config(directory, epochs: int = 0, embed_dim: int = 16):
    path = directory / f"tiny_{epochs}_{embed_dim}.toml"
    path.write_text(TINY_TOML.format(epochs=epochs, embed_dim=embed_dim), encoding="utf-8")
    return str(path)


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


@pytest.fixture
def trained(tmp_path):
    """epochs = 0 的检查点"""
    config = write_config(tmp_path)
    out = tmp_path / "train"
    assert main(["train", "--config", config, "--out", str(out)]) == EXIT_OK
    return config, out


def test_train_writes_artifacts(trained):
    _, out = trained
    assert (out / "checkpoint.pt").is_file()
    assert (out / "run.log").is_file()
    assert not (out / ".lock").exists()

    resolved = json.loads((out / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["encoder"]["embed_dim"] == 16
    assert len(resolved["config_hash"]) == 16

    summary = json.loads((out / "train_summary.json").read_text(encoding="utf-8"))
    assert summary["epochs"] == 0
    assert summary["final_loss"] is None
    assert summary["config_hash"] == resolved["config_hash"]

    header = read_rows(out / "train_log.csv")[0]
    assert header[0] == "epoch" and header[-1] == "config_hash"


def test_eval_report_and_sweep(trained):
    config, out = trained
    eval_dir = out.parent / "eval"
    code = main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--config", config,
                 "--out", str(eval_dir), "--sweep-missing", "--audit"])
    assert code == EXIT_OK

    report = json.loads((eval_dir / "report.json").read_text(encoding="utf-8"))
    assert 0.0 <= report["mAP"] <= 1.0
    assert report["protocol"]["exclusion"] == "none"
    assert "routing_fidelity" in report

    sweep = read_rows(eval_dir / "sweep.csv")
    assert len(sweep) == 8
    assert sweep[0] == ["setting", "mAP", "R-1", "R-5", "R-10", "config_hash"]
    assert [row[0] for row in sweep[1:]] == [
        "M(RGB)", "M(NIR)", "M(TIR)", "M(RGB+NIR)", "M(RGB+TIR)", "M(NIR+TIR)", "Average",
    ]

    audit = (eval_dir / "audit.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(audit) == 12
    assert json.loads(audit[0])["split"] == "query"
    assert (eval_dir / "cmc_curve.png").is_file()


def test_eval_missing_pattern(trained):
    config, out = trained
    eval_dir = out.parent / "eval_missing"
    code = main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--config", config,
                 "--out", str(eval_dir), "--missing", "rgb"])
    assert code == EXIT_OK
    report = json.loads((eval_dir / "report_missing_rgb.json").read_text(encoding="utf-8"))
    assert report["protocol"]["missing"] == "M(RGB)"
    assert (eval_dir / "report_missing_rgb.csv").is_file()


def test_eval_without_config_uses_checkpoint(trained):
    _, out = trained
    eval_dir = out.parent / "eval_default"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--out", str(eval_dir)]) == EXIT_OK
    assert (eval_dir / "report.json").is_file()


def test_eval_hash_mismatch(trained, tmp_path):
    """配置的模型结构与检查点不一致时以用法错误退出"""
    _, out = trained
    wider = write_config(tmp_path, embed_dim=32)
    code = main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--config", wider,
                 "--out", str(tmp_path / "eval_wide")])
    assert code == EXIT_USAGE


def test_eval_missing_checkpoint(tmp_path):
    code = main(["eval", "--checkpoint", str(tmp_path / "absent.pt"), "--config", write_config(tmp_path),
                 "--out", str(tmp_path / "eval")])
    assert code == EXIT_RUNTIME


def test_usage_errors(tmp_path):
    config = write_config(tmp_path)
    assert main(["ablate", "--config", config, "--out", str(tmp_path / "a"), "--variants", "full,bogus"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "absent.toml")]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", "x.pt", "--config", config, "--missing", "uv"]) == EXIT_USAGE
    assert main(["bogus-command"]) == EXIT_USAGE

    bad = tmp_path / "bad.toml"
    bad.write_text("[optim]\nepochs = -1\n", encoding="utf-8")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "b")]) == EXIT_USAGE


def test_locked_directory(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123", encoding="utf-8")
    assert main(["train", "--config", write_config(tmp_path), "--out", str(out)]) == EXIT_USAGE
    assert not (out / "checkpoint.pt").exists()


def test_generate_data_then_train_from_directory(tmp_path):
    config = write_config(tmp_path)
    data = tmp_path / "data"
    assert main(["generate-data", "--config", config, "--out", str(data)]) == EXIT_OK
    for split in ("train", "query", "gallery"):
        assert (data / split / "rgb").is_dir()
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["splits"]["train"]["count"] == 18

    out = tmp_path / "from_dir"
    assert main(["train", "--config", config, "--data", str(data), "--out", str(out)]) == EXIT_OK
    resolved = json.loads((out / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["data"]["source"] == "directory"


def test_same_config_same_loss(tmp_path):
    """同一配置训练两次得到相同的最终损失"""
    config = write_config(tmp_path, epochs=1)
    losses = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["train", "--config", config, "--out", str(out)]) == EXIT_OK
        losses.append(json.loads((out / "train_summary.json").read_text(encoding="utf-8"))["final_loss"])
    assert losses[0] is not None
    assert losses[0] == losses[1]

def test_train_resume(tmp_path):
    """一个 epoch 后续训到两个 epoch：日志两行，检查点记录 epoch 2"""
    out = tmp_path / "resume"
    assert main(["train", "--config", write_config(tmp_path, epochs=1), "--out", str(out)]) == EXIT_OK
    first = read_rows(out / "train_log.csv")

    longer = write_config(tmp_path, epochs=2)
    code = main(["train", "--config", longer, "--out", str(out), "--resume", str(out / "checkpoint.pt")])
    assert code == EXIT_OK

    rows = read_rows(out / "train_log.csv")
    assert len(rows) == 3
    assert rows[1][:-1] == first[1][:-1]
    summary = json.loads((out / "train_summary.json").read_text(encoding="utf-8"))
    assert summary["start_epoch"] == 2


def test_train_resume_errors(tmp_path):
    config = write_config(tmp_path, epochs=1)
    assert main(["train", "--config", config, "--out", str(tmp_path / "a"),
                 "--resume", str(tmp_path / "absent.pt")]) == EXIT_RUNTIME

    source = tmp_path / "source"
    assert main(["train", "--config", config, "--out", str(source)]) == EXIT_OK
    wider = write_config(tmp_path, epochs=2, embed_dim=32)
    assert main(["train", "--config", wider, "--out", str(tmp_path / "b"),
                 "--resume", str(source / "checkpoint.pt")]) == EXIT_USAGE
