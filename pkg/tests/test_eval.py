"""Evaluation metrics against hand-rolled oracles."""

import numpy as np
import pytest
import torch

from scenelm.evaluate import (
    Report,
    aabb_iou,
    eval_qa,
    eval_reconstruction,
    greedy_match_f1,
    normalize_answer,
    psnr,
)
from scenelm.scenes import COLOR_PALETTE
from scenelm.trainer import TrainSample


def _qa_sample(question, answer, scene=0):
    return TrainSample(scene_index=scene, tag="qa", regime="labeled",
                       prompt_ids=[], answer_ids=[], question=question, answer=answer)


class TestNormalization:
    def test_exact(self):
        assert normalize_answer("blue") == "blue"

    def test_case_and_whitespace(self):
        assert normalize_answer("  Blue ") == "blue"
        assert normalize_answer("a  red\tchair") == "a red chair"


class TestEvalQa:
    def test_match_and_mismatch(self):
        samples = [_qa_sample("q1", "blue"), _qa_sample("q2", "red")]
        answers = {"q1": "Blue ", "q2": "green"}
        em = eval_qa(lambda si, q: answers[q], samples)
        assert em == 0.5

    def test_chance_level_on_balanced_color_questions(self):
        # chance oracle: uniform-random color predictor on balanced answers
        colors = list(COLOR_PALETTE)
        n = 600
        samples = [_qa_sample(f"q{k}", colors[k % len(colors)]) for k in range(n)]
        rng = np.random.default_rng(0)
        em = eval_qa(lambda si, q: colors[rng.integers(len(colors))], samples)
        p = 1.0 / len(colors)
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(em - p) < 3 * sigma

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            eval_qa(lambda si, q: "", [])


def _iou_oracle(amin, amax, bmin, bmax):
    """Independent per-axis segment-overlap computation."""
    inter = 1.0
    for ax in range(3):
        lo = max(amin[ax], bmin[ax])
        hi = min(amax[ax], bmax[ax])
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    va = (amax[0] - amin[0]) * (amax[1] - amin[1]) * (amax[2] - amin[2])
    vb = (bmax[0] - bmin[0]) * (bmax[1] - bmin[1]) * (bmax[2] - bmin[2])
    return inter / (va + vb - inter)


class TestAabbIou:
    def test_identical_boxes(self):
        assert aabb_iou([0, 0, 0], [1, 1, 1], [0, 0, 0], [1, 1, 1]) == 1.0

    def test_disjoint_boxes(self):
        assert aabb_iou([0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]) == 0.0

    def test_half_overlap_is_one_third(self):
        # unit cubes offset by half: inter 0.5, union 1.5
        iou = aabb_iou([0, 0, 0], [1, 1, 1], [0.5, 0, 0], [1.5, 1, 1])
        assert iou == pytest.approx(1 / 3, abs=1e-12)
        assert iou > 0.25
        assert iou < 0.5

    def test_matches_analytic_oracle_on_1000_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            amin = rng.uniform(-2, 2, 3)
            amax = amin + rng.uniform(0.1, 2, 3)
            bmin = rng.uniform(-2, 2, 3)
            bmax = bmin + rng.uniform(0.1, 2, 3)
            assert aabb_iou(amin, amax, bmin, bmax) == pytest.approx(
                _iou_oracle(amin, amax, bmin, bmax), abs=1e-9
            )


def _f1_oracle(pred_boxes, target_boxes, thr):
    """Hand-rolled precision/recall from the same greedy one-to-one rule."""
    pairs = sorted(
        ((aabb_iou(*p, *t), i, j) for i, p in enumerate(pred_boxes) for j, t in enumerate(target_boxes)),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    up, ut, tp = set(), set(), 0
    for iou, i, j in pairs:
        if iou < thr:
            break
        if i not in up and j not in ut:
            up.add(i)
            ut.add(j)
            tp += 1
    if tp == 0:
        return 0.0
    prec = tp / len(pred_boxes)
    rec = tp / len(target_boxes)
    return 2 * prec * rec / (prec + rec)


class TestGreedyF1:
    def test_perfect_prediction(self):
        boxes = [(np.zeros(3), np.ones(3)), (np.ones(3) * 2, np.ones(3) * 3)]
        assert greedy_match_f1(boxes, boxes, 0.25) == 1.0

    def test_no_overlap_zero(self):
        pred = [(np.zeros(3), np.ones(3))]
        target = [(np.ones(3) * 5, np.ones(3) * 6)]
        assert greedy_match_f1(pred, target, 0.25) == 0.0

    def test_empty_cases(self):
        box = [(np.zeros(3), np.ones(3))]
        assert greedy_match_f1([], [], 0.25) == 1.0
        assert greedy_match_f1(box, [], 0.25) == 0.0
        assert greedy_match_f1([], box, 0.25) == 0.0

    def test_matches_oracle_on_20_random_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            def boxes(n):
                out = []
                for _ in range(n):
                    bmin = rng.uniform(0, 3, 3)
                    out.append((bmin, bmin + rng.uniform(0.2, 1.5, 3)))
                return out

            pred = boxes(rng.integers(1, 5))
            target = boxes(rng.integers(1, 5))
            assert greedy_match_f1(pred, target, 0.25) == pytest.approx(
                _f1_oracle(pred, target, 0.25), abs=1e-12
            )


class TestReport:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError, match="qa_em"):
            Report(run_id="x", config={}, metrics={"qa_em": 1.2})
        with pytest.raises(ValueError, match="psnr"):
            Report(run_id="x", config={}, metrics={"recon_psnr_view": -3.0})

    def test_valid_report_serializes(self, tmp_path):
        r = Report(run_id="x", config={"seed": 0},
                   metrics={"qa_em": 0.5, "ground_acc_at_0_25": 0.25,
                            "ground_f1_at_0_25": 0.1, "recon_psnr_view": 14.0,
                            "recon_psnr_bev": 12.0})
        r.to_json(tmp_path / "metrics.json")
        assert (tmp_path / "metrics.json").exists()


@pytest.fixture()
def setup(tiny_dataset, trained_teacher):
    from scenelm.backbone import BackboneConfig, MultimodalLm
    from scenelm.denoiser import Denoiser, DenoiserConfig

    torch.manual_seed(0)
    model = MultimodalLm(BackboneConfig(dim=48, heads=4, layers=2, patch=16, max_seq=192))
    denoiser = Denoiser(DenoiserConfig(width=64, blocks=2, queries=8, heads=4,
                                       latent_dim=8, latent_patch=2, max_tokens=16,
                                       cond_dim=48))
    return model, denoiser


class TestEvalReconstruction:

    def test_oracle_eps_recovers_teacher_psnr(self, setup, tiny_dataset, trained_teacher, monkeypatch):
        # eps_hat == eps makes z0_hat == z0 algebraically, so the PSNR equals
        # the teacher's own reconstruction PSNR
        model, denoiser = setup
        captured = {}
        from scenelm import denoiser as dmod

        orig = dmod.forward_diffuse

        def spy(schedule, z, t, eps):
            out = orig(schedule, z, t, eps)
            captured["eps"] = out.eps
            return out

        monkeypatch.setattr("scenelm.evaluate.forward_diffuse", spy)
        monkeypatch.setattr(denoiser, "predict_noise", lambda z_t, c, t: captured["eps"])
        pv, pb = eval_reconstruction(model, denoiser, trained_teacher, tiny_dataset, [0])

        bundle = tiny_dataset[0]
        z0 = trained_teacher.encode(bundle.frames[0].rgb)
        direct = psnr(trained_teacher.decode(z0), bundle.frames[0].rgb)
        assert pv == pytest.approx(direct, abs=1e-3)

    def test_untrained_below_teacher_psnr(self, setup, tiny_dataset, trained_teacher):
        model, denoiser = setup
        pv, pb = eval_reconstruction(model, denoiser, trained_teacher, tiny_dataset, [0, 1])
        bundle = tiny_dataset[0]
        z0 = trained_teacher.encode(bundle.frames[0].rgb)
        teacher_psnr = psnr(trained_teacher.decode(z0), bundle.frames[0].rgb)
        assert pv < teacher_psnr
        assert pb > 0
