"""Backbone contracts: masking semantics, causality, text loss oracle."""

import numpy as np
import pytest
import torch

from scenelm.backbone import (
    BackboneConfig,
    MultimodalLm,
    MultimodalSequence,
    ViewMask,
    build_scene_pack,
    full_view_mask,
    load_backbone,
    save_backbone,
    text_loss,
)
from scenelm.scenes import generate_scene, render_views

CFG = BackboneConfig(dim=48, heads=4, layers=2, vocab_size=512, patch=8, max_seq=128)


@pytest.fixture(scope="module")
def frames():
    return render_views(generate_scene(0), num_views=3, resolution=32)


@pytest.fixture()
def model():
    torch.manual_seed(0)
    return MultimodalLm(CFG)


def _seq(visual, ids, labels=None):
    ids_t = torch.tensor(ids, dtype=torch.long)
    if labels is None:
        labels_t = ids_t.clone()
    else:
        labels_t = torch.tensor(labels, dtype=torch.long)
    return MultimodalSequence(visual=visual, text_ids=ids_t, labels=labels_t)


class TestViewMask:
    def test_zero_count_must_match_gamma(self):
        with pytest.raises(ValueError, match="zeros"):
            ViewMask(bits=np.array([1, 1, 1, 1]), gamma=0.5)

    def test_masked_indices(self):
        vm = ViewMask(bits=np.array([1, 0, 1, 0]), gamma=0.5)
        np.testing.assert_array_equal(vm.masked_indices, [1, 3])


class TestEmbedVideo:
    def test_unmasked_output_independent_of_mask_token(self, model, frames):
        vm = full_view_mask(3)
        a = model.embed_video(frames, vm).tokens.detach().clone()
        with torch.no_grad():
            model.mask_token.add_(1.0)
        b = model.embed_video(frames, vm).tokens.detach()
        assert torch.equal(a, b)

    def test_masked_view_tokens_equal_mask_token(self, model, frames):
        vm = ViewMask(bits=np.array([1, 0, 1]), gamma=1 / 3)
        vt = model.embed_video(frames, vm)
        per_view = vt.tokens.shape[0] // 3
        block = vt.tokens[per_view : 2 * per_view].detach()
        assert torch.equal(block, model.mask_token.detach().unsqueeze(0).expand(per_view, -1))

    def test_masked_pixels_do_not_leak(self, model, frames):
        vm = ViewMask(bits=np.array([1, 0, 1]), gamma=1 / 3)
        a = model.embed_video(frames, vm).tokens.detach().clone()
        perturbed = [f for f in frames]
        import copy

        f1 = copy.deepcopy(frames[1])
        f1.rgb = np.clip(f1.rgb + np.random.default_rng(0).normal(0, 0.3, f1.rgb.shape), 0, 1).astype(np.float32)
        perturbed[1] = f1
        b = model.embed_video(perturbed, vm).tokens.detach()
        assert torch.equal(a, b)

    def test_position_encoding_withheld_on_masked_views(self, model, frames):
        # two different masked frames embed identically even though their
        # world geometry differs
        vm = ViewMask(bits=np.array([0, 1, 1]), gamma=1 / 3)
        a = model.embed_video(frames, vm).tokens
        swapped = [frames[2], frames[1], frames[0]]
        b = model.embed_video(swapped, vm).tokens
        per_view = a.shape[0] // 3
        assert torch.equal(a[:per_view], b[:per_view])

    def test_length_mismatch_rejected(self, model, frames):
        with pytest.raises(ValueError, match="mask"):
            model.embed_video(frames, full_view_mask(4))

    def test_token_order_is_frame_order(self, model, frames):
        vt = model.embed_video(frames, full_view_mask(3))
        np.testing.assert_array_equal(np.unique(vt.view_index), [0, 1, 2])
        assert (np.diff(vt.view_index) >= 0).all()


class TestForward:
    def test_causality_of_text_positions(self, model, frames):
        visual = model.embed_video(frames, full_view_mask(3))
        ids = [10, 20, 30, 40]
        h1, _ = model.forward(_seq(visual, ids))
        h2, _ = model.forward(_seq(visual, [10, 20, 99, 40]))
        n = visual.tokens.shape[0]
        k = 2  # changed text token index
        assert torch.equal(h1[: n + k], h2[: n + k])
        assert not torch.equal(h1[n + k], h2[n + k])

    def test_text_never_touches_visual_hidden(self, model, frames):
        visual = model.embed_video(frames, full_view_mask(3))
        h1, _ = model.forward(_seq(visual, [1, 2, 3]))
        h2, _ = model.forward(_seq(visual, [7, 8, 9]))
        n = visual.tokens.shape[0]
        assert torch.equal(h1[:n], h2[:n])

    def test_empty_text_valid(self, model, frames):
        visual = model.embed_video(frames, full_view_mask(3))
        hidden, logits = model.forward(
            MultimodalSequence(visual=visual, text_ids=torch.zeros(0, dtype=torch.long),
                               labels=torch.zeros(0, dtype=torch.long))
        )
        assert hidden.shape[0] == visual.tokens.shape[0]
        assert logits.shape == (0, CFG.vocab_size)
        loss, applied = text_loss(logits, torch.zeros(0, dtype=torch.long))
        assert not applied and float(loss) == 0.0

    def test_overlong_rejected(self, model, frames):
        visual = model.embed_video(frames, full_view_mask(3))
        too_long = CFG.max_seq  # plus the 48-token visual prefix
        with pytest.raises(ValueError, match="context"):
            model.forward(_seq(visual, [0] * too_long))

    def test_prefix_contract(self, model, frames):
        visual = model.embed_video(frames, full_view_mask(3))
        assert visual.tokens.shape[0] == 3 * (32 // 8) ** 2


class TestTextLoss:
    def test_uniform_logits_ln_vocab(self):
        logits = torch.zeros(4, 512)
        labels = torch.tensor([1, 2, 3, 4])
        loss, applied = text_loss(logits, labels)
        assert applied
        assert float(loss) == pytest.approx(np.log(512), rel=1e-6)

    def test_one_hot_drives_loss_to_zero(self):
        logits = torch.full((3, 16), -50.0)
        labels = torch.tensor([5, 6, 7])
        for r, l in enumerate(labels):
            logits[r, l] = 50.0
        loss, _ = text_loss(logits, labels)
        assert float(loss) < 1e-6

    def test_matches_hand_rolled_log_softmax_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 5))
        labels = np.array([2, 0, 4])
        # independent oracle: per-position log-softmax then mean
        expected = 0.0
        for r in range(3):
            row = logits[r]
            log_probs = row - (np.log(np.sum(np.exp(row - row.max()))) + row.max())
            expected -= log_probs[labels[r]]
        expected /= 3
        loss, _ = text_loss(torch.from_numpy(logits), torch.from_numpy(labels))
        assert float(loss) == pytest.approx(expected, abs=1e-6)

    def test_ignore_marked_positions_excluded(self):
        logits = torch.zeros(3, 8)
        labels = torch.tensor([-100, 3, -100])
        loss, applied = text_loss(logits, labels)
        assert applied
        assert float(loss) == pytest.approx(np.log(8), rel=1e-6)


class TestGradients:
    def test_mask_token_gets_gradient_when_masked(self, model, frames):
        vm = ViewMask(bits=np.array([1, 0, 1]), gamma=1 / 3)
        visual = model.embed_video(frames, vm)
        hidden, _ = model.forward(_seq(visual, [1, 2], labels=[1, 2]))
        hidden.sum().backward()
        assert model.mask_token.grad is not None
        assert float(model.mask_token.grad.abs().sum()) > 0

    def test_mask_token_no_gradient_without_masking(self, model, frames):
        visual = model.embed_video(frames, full_view_mask(3))
        hidden, logits = model.forward(_seq(visual, [1, 2], labels=[1, 2]))
        loss, _ = text_loss(logits, torch.tensor([1, 2]))
        loss.backward()
        assert model.mask_token.grad is None or float(model.mask_token.grad.abs().sum()) == 0


class TestCheckpoint:
    def test_round_trip(self, model, frames, tmp_path):
        path = tmp_path / "model.pt"
        save_backbone(model, path)
        loaded = load_backbone(path)
        visual = model.embed_video(frames, full_view_mask(3))
        h1, _ = model.forward(_seq(visual, [1, 2, 3]))
        visual2 = loaded.embed_video(frames, full_view_mask(3))
        h2, _ = loaded.forward(_seq(visual2, [1, 2, 3]))
        assert torch.equal(h1, h2)


class TestScenePack:
    def test_patch_points_inside_room(self, frames):
        pack = build_scene_pack(frames, patch=8)
        scene = generate_scene(0)
        for view_pts in pack.points:
            for pts in view_pts:
                if len(pts):
                    assert (pts >= -1e-4).all()
                    assert (pts <= scene.room_size + 1e-4).all()

    def test_centers_are_point_means(self, frames):
        pack = build_scene_pack(frames, patch=8)
        v, p = 1, 5
        pts = pack.points[v][p]
        if len(pts):
            np.testing.assert_allclose(pack.centers[v, p], pts.mean(axis=0), atol=1e-5)
