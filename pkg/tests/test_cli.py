"""CLI pipeline: gen-scenes -> train -> eval -> report, plus error paths."""

import json

import pytest

from scenelm.backbone import BackboneConfig
from scenelm.cli import main
from scenelm.denoiser import DenoiserConfig
from scenelm.teacher import TeacherConfig
from scenelm.trainer import TrainConfig


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["gen-scenes", "--seed", "7", "--scenes", "12", "--frames", "8",
                 "--resolution", "32", "--bev-resolution", "32", "--out", str(data)]) == 0
    cfg = TrainConfig(
        steps=6, batch_size=2, warmup_steps=2, lr=1e-3, eval_fraction=0.2, seed=0,
        backbone=BackboneConfig(dim=48, heads=4, layers=2, patch=8, max_seq=192),
        denoiser=DenoiserConfig(width=64, blocks=2, queries=8, heads=4, latent_dim=8,
                                latent_patch=2, max_tokens=16, cond_dim=48),
        teacher=TeacherConfig(epochs=40, mse_threshold=0.02, seed=0),
    )
    cfg_path = root / "config.json"
    cfg.to_json(cfg_path)
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run)]) == 0
    return root, data, run


class TestGenScenes:
    def test_dataset_layout(self, pipeline):
        _, data, _ = pipeline
        manifest = json.loads((data / "manifest").read_text())
        assert len(manifest["scenes"]) == 12
        scene0 = data / manifest["scenes"][0]["name"]
        for fname in ("scene.json", "cameras", "annotations", "bev.png",
                      "frame_0.rgb.png", "frame_0.depth.raw"):
            assert (scene0 / fname).exists(), fname


class TestTrain:
    def test_checkpoint_complete(self, pipeline):
        _, _, run = pipeline
        for fname in ("model.pt", "heads.pt", "teacher.pt", "tokenizer.json",
                      "config.json", "loss_log.jsonl"):
            assert (run / fname).exists(), fname

    def test_loss_log_has_all_steps(self, pipeline):
        _, _, run = pipeline
        lines = (run / "loss_log.jsonl").read_text().splitlines()
        assert len(lines) == 6


class TestEval:
    def test_eval_writes_metrics_and_records(self, pipeline):
        _, data, run = pipeline
        assert main(["eval", "--ckpt", str(run), "--data", str(data), "--split", "eval"]) == 0
        metrics = json.loads((run / "metrics.json").read_text())["metrics"]
        for key in ("qa_em", "ground_acc_at_0_25", "ground_f1_at_0_25",
                    "recon_psnr_view", "recon_psnr_bev"):
            assert key in metrics, key
        assert 0.0 <= metrics["qa_em"] <= 1.0
        assert metrics["recon_psnr_view"] > 0
        records = (run / "grounding_records.jsonl").read_text().splitlines()
        assert records
        rec = json.loads(records[0])
        for key in ("expression", "predicted_ids", "target_ids", "ious"):
            assert key in rec


class TestReport:
    def test_report_files(self, pipeline):
        _, _, run = pipeline
        assert main(["report", "--run", str(run)]) == 0
        assert (run / "report.txt").exists()
        assert (run / "loss_curves.png").exists()
        text = (run / "report.txt").read_text()
        for name in ("text", "cross", "global", "ground"):
            assert name in text

    def test_report_idempotent(self, pipeline):
        _, _, run = pipeline
        assert main(["report", "--run", str(run)]) == 0
        first = {p.name: p.read_bytes() for p in ((run / "report.txt"), (run / "loss_curves.png"))}
        assert main(["report", "--run", str(run)]) == 0
        for name, blob in first.items():
            assert (run / name).read_bytes() == blob

    def test_report_mentions_every_metric(self, pipeline):
        _, _, run = pipeline
        assert main(["report", "--run", str(run)]) == 0
        text = (run / "report.txt").read_text()
        for key in ("qa_em", "ground_acc_at_0_25", "ground_f1_at_0_25",
                    "recon_psnr_view", "recon_psnr_bev"):
            assert key in text


class TestErrors:
    def test_missing_data_dir_exits_nonzero(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.json"),
                     "--data", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_loss_log_for_report(self, tmp_path, capsys):
        assert main(["report", "--run", str(tmp_path)]) == 1
        assert "loss log" in capsys.readouterr().err

    def test_bad_split_name_rejected(self, pipeline, capsys):
        root, data, run = pipeline
        with pytest.raises(SystemExit):
            main(["eval", "--ckpt", str(run), "--data", str(data), "--split", "test"])
