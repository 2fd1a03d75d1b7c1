"""End-to-end command-line behavior: exit codes, artifacts, determinism."""

import json

import pytest
import yaml

from trialign.cli import main


MICRO_MODEL = {
    "dim": 8,
    "heads": 2,
    "video_layers": 1,
    "text_layers": 1,
    "fusion_layers": 1,
    "frames": 2,
    "image_size": 8,
    "patch": 4,
    "max_text_len": 12,
}


def write_config(path, train=None, data=None, extra=None):
    cfg = {
        "model": dict(MICRO_MODEL),
        "train": {
            "batch_size": 4,
            "epochs": 2,
            "warmup_epochs": 1,
            "peak_lr": 1e-3,
            "seed": 3,
        },
    }
    if train:
        cfg["train"].update(train)
    if data:
        cfg["data"] = data
    if extra:
        cfg.update(extra)
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return path


@pytest.fixture(scope="module")
def datadir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    rc = main(
        [
            "gen-data", "--n", "16", "--seed", "5", "--out", str(out),
            "--frames", "2", "--size", "8",
        ]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def pretrained(datadir, tmp_path_factory):
    run = tmp_path_factory.mktemp("pretrain")
    cfg = write_config(run / "cfg.yaml", data={"manifest": str(datadir / "manifest.jsonl")})
    rc = main(["pretrain", "--config", str(cfg), "--out", str(run)])
    assert rc == 0
    return run


class TestGenData:
    def test_is_deterministic(self, datadir, tmp_path):
        again = tmp_path / "again"
        rc = main(
            [
                "gen-data", "--n", "16", "--seed", "5", "--out", str(again),
                "--frames", "2", "--size", "8",
            ]
        )
        assert rc == 0
        for name in ("manifest.jsonl", "qa.jsonl"):
            assert (again / name).read_bytes() == (datadir / name).read_bytes()

    def test_clip_store(self, tmp_path):
        rc = main(
            [
                "gen-data", "--n", "4", "--seed", "1", "--out", str(tmp_path),
                "--frames", "2", "--size", "8", "--store-clips",
            ]
        )
        assert rc == 0
        assert (tmp_path / "clips.f32").exists()
        assert (tmp_path / "clips.f32.json").exists()

    def test_over_capacity_is_usage_error(self, tmp_path, capsys):
        rc = main(["gen-data", "--n", "99999", "--out", str(tmp_path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert err.count("\n") == 1


class TestPretrainCommand:
    def test_artifacts(self, pretrained):
        assert (pretrained / "metrics.jsonl").exists()
        assert (pretrained / "ckpt_final.zip").exists()
        resolved = yaml.safe_load((pretrained / "config_resolved.yaml").read_text())
        assert resolved["model"]["dim"] == 8
        assert resolved["train"]["seed"] == 3

    def test_set_override_applies(self, datadir, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            data={"manifest": str(datadir / "manifest.jsonl")},
        )
        rc = main(
            [
                "pretrain", "--config", str(cfg), "--out", str(tmp_path / "run"),
                "--set", "train.epochs=3", "--set", "train.seed=9",
            ]
        )
        assert rc == 0
        resolved = yaml.safe_load(
            (tmp_path / "run" / "config_resolved.yaml").read_text()
        )
        assert resolved["train"]["epochs"] == 3
        assert resolved["train"]["seed"] == 9

    def test_unknown_config_key_exits_one(self, datadir, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            data={"manifest": str(datadir / "manifest.jsonl")},
            extra={"model": {**MICRO_MODEL, "depth": 3}},
        )
        rc = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert "depth" in err

    def test_bad_train_value_exits_one(self, datadir, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            train={"batch_size": 1},
            data={"manifest": str(datadir / "manifest.jsonl")},
        )
        rc = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: ")

    def test_missing_manifest_exits_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.yaml")
        rc = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "manifest" in capsys.readouterr().err

    def test_unknown_subcommand_exits_one(self, capsys):
        rc = main(["frobnicate"])
        assert rc == 1


class TestEvalRetrieval:
    def test_untrained_reports_full_metric_set(self, datadir, pretrained, capsys, tmp_path):
        rc = main(
            [
                "eval-retrieval",
                "--ckpt", str(pretrained / "ckpt_epoch0.zip"),
                "--data", str(datadir / "manifest.jsonl"),
                "--split", "test",
                "--out", str(tmp_path),
            ]
        )
        assert rc == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        for key in ("R@1", "R@5", "R@10", "MedR", "mean_positive_similarity"):
            assert key in report
        assert 0.0 <= report["R@1"] <= 1.0
        from trialign.data import load_manifest

        n_test = sum(1 for r in load_manifest(datadir / "manifest.jsonl") if r.split == "test")
        assert report["n"] == n_test
        on_disk = json.loads((tmp_path / "retrieval.jsonl").read_text())
        assert on_disk == report


class TestFinetuneCommands:
    def test_finetune_retrieval_runs(self, datadir, pretrained, tmp_path):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            train={"epochs": 2, "warmup_epochs": 1},
            data={"manifest": str(datadir / "manifest.jsonl")},
        )
        rc = main(
            [
                "finetune-retrieval", "--config", str(cfg),
                "--out", str(tmp_path / "ft"),
                "--init", str(pretrained / "ckpt_final.zip"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "ft" / "ckpt_final.zip").exists()

    def test_finetune_vqa_reports_accuracy(self, datadir, pretrained, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "cfg.yaml",
            train={"epochs": 2, "warmup_epochs": 1},
            data={
                "manifest": str(datadir / "manifest.jsonl"),
                "qa": str(datadir / "qa.jsonl"),
            },
        )
        rc = main(
            [
                "finetune-vqa", "--config", str(cfg),
                "--out", str(tmp_path / "vqa"),
                "--init", str(pretrained / "ckpt_final.zip"),
                "--mode", "mc",
            ]
        )
        assert rc == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["mode"] == "mc"
        assert 0.0 <= report["test_accuracy"] <= 1.0


class TestDiagnostics:
    def test_grad_check_passes(self, capsys):
        rc = main(["grad-check", "--component", "all"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "FAIL" not in out

    def test_oracle_check_passes(self, capsys):
        rc = main(["oracle-check", "--trials", "10"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "FAIL" not in out

    def test_efficiency_counts(self, capsys):
        rc = main(["efficiency", "--n", "10", "--m", "20", "--k", "5"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["dual"] == {
            "uni_forwards": 30, "fusion_forwards": 0, "dot_products": 200,
        }
        assert report["cross"]["fusion_forwards"] == 200
        assert report["rescore"]["fusion_forwards"] == 50
