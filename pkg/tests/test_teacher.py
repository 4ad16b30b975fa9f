"""Latent teacher: convergence, determinism, scaling, checkpointing."""

import numpy as np
import pytest
import torch

from scenelm.dataset import generate_dataset
from scenelm.teacher import (
    LatentGrid,
    TeacherConfig,
    TeacherTrainingError,
    load_teacher,
    reconstruction_mse,
    save_teacher,
    teacher_corpus,
    train_teacher,
)


def _tiny_images(n=104, res=16, seed=0):
    rng = np.random.default_rng(seed)
    imgs = []
    for _ in range(n):
        img = np.zeros((res, res, 3), dtype=np.float32)
        img[:] = rng.uniform(0.2, 0.8, size=3)
        x0, y0 = rng.integers(0, res // 2, size=2)
        img[y0 : y0 + res // 3, x0 : x0 + res // 3] = rng.uniform(0, 1, size=3)
        imgs.append(img)
    return imgs


class TestTrainedTeacher:
    def test_heldout_mse_below_threshold(self, trained_teacher):
        # frames from a scene the teacher never saw
        from scenelm.dataset import build_scene_bundle

        held = build_scene_bundle(seed=999, num_views=4)
        assert reconstruction_mse(trained_teacher, [f.rgb for f in held.frames]) < 0.01

    def test_encode_deterministic(self, trained_teacher, tiny_dataset):
        img = tiny_dataset[0].frames[0].rgb
        a = trained_teacher.encode(img).tokens
        b = trained_teacher.encode(img).tokens
        assert torch.equal(a, b)

    def test_latent_shape(self, trained_teacher, tiny_dataset):
        z = trained_teacher.encode(tiny_dataset[0].frames[0].rgb)
        assert z.tokens.shape == (8, 8, 8)
        assert z.stride == 8

    def test_indivisible_size_rejected(self, trained_teacher):
        with pytest.raises(ValueError, match="stride"):
            trained_teacher.encode(np.zeros((60, 64, 3), dtype=np.float32))

    def test_black_image_finite_and_near_black_decode(self, trained_teacher):
        z = trained_teacher.encode(np.zeros((64, 64, 3), dtype=np.float32))
        assert torch.isfinite(z.tokens).all()
        rec = trained_teacher.decode(z)
        assert rec.mean() < 0.25

    def test_encode_decode_inverse_up_to_threshold(self, trained_teacher, tiny_dataset):
        img = tiny_dataset[-1].frames[3].rgb
        rec = trained_teacher.decode(trained_teacher.encode(img))
        assert float(np.mean((rec - img) ** 2)) < 0.02

    def test_latent_variance_in_band(self, trained_teacher, tiny_dataset):
        imgs = teacher_corpus(tiny_dataset)[:40]
        zs = torch.stack([trained_teacher.encode(im).tokens for im in imgs])
        var = zs.reshape(-1, 8).var(dim=0)
        assert (var > 0.1).all() and (var < 10.0).all()

    def test_bev_encodes_with_same_teacher(self, trained_teacher, tiny_dataset):
        z = trained_teacher.encode(tiny_dataset[0].bev, source="bev")
        assert z.source == "bev"
        assert z.tokens.shape == (8, 8, 8)


class TestTrainingContract:
    def test_too_few_images_rejected(self):
        with pytest.raises(ValueError, match="100"):
            train_teacher(_tiny_images(50), TeacherConfig(epochs=1))

    def test_nonconvergence_reports_mse(self):
        cfg = TeacherConfig(epochs=0, mse_threshold=1e-6)
        with pytest.raises(TeacherTrainingError, match="MSE"):
            train_teacher(_tiny_images(), cfg)

    def test_plain_autoencoder_at_most_kl_mse(self):
        # paired runs: same seed and schedule, kl_weight 0 vs default
        imgs = _tiny_images()
        plain = train_teacher(imgs, TeacherConfig(epochs=25, kl_weight=0.0, mse_threshold=1.0, seed=1))
        regd = train_teacher(imgs, TeacherConfig(epochs=25, kl_weight=1e-3, mse_threshold=1.0, seed=1))
        val = imgs[:10]
        assert reconstruction_mse(plain, val) <= reconstruction_mse(regd, val) + 1e-4


class TestCheckpoint:
    def test_round_trip_byte_identical_latents(self, trained_teacher, tiny_dataset, tmp_path):
        path = tmp_path / "teacher.pt"
        checksum = save_teacher(trained_teacher, path)
        loaded = load_teacher(path)
        assert loaded.state_checksum() == checksum
        img = tiny_dataset[2].frames[1].rgb
        a = trained_teacher.encode(img).tokens.numpy()
        b = loaded.encode(img).tokens.numpy()
        assert a.tobytes() == b.tobytes()

    def test_checksum_detects_tampering(self, trained_teacher, tmp_path):
        path = tmp_path / "teacher.pt"
        save_teacher(trained_teacher, path)
        blob = torch.load(path, map_location="cpu", weights_only=False)
        key = next(iter(blob["state"]))
        blob["state"][key] = blob["state"][key] + 1.0
        torch.save(blob, path)
        with pytest.raises(ValueError, match="checksum"):
            load_teacher(path)


class TestLatentGrid:
    def test_bad_source_rejected(self):
        with pytest.raises(ValueError, match="source"):
            LatentGrid(tokens=torch.zeros(2, 2, 2), stride=8, source="???")

    def test_nonfinite_rejected(self):
        bad = torch.full((2, 2, 2), float("nan"))
        with pytest.raises(ValueError, match="finite"):
            LatentGrid(tokens=bad, stride=8, source="view")
