"""Evaluation: exact-match QA, 3D-IoU grounding metrics, reconstruction PSNR."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import MultimodalLm, MultimodalSequence, ViewMask, full_view_mask
from .dataset import SceneBundle
from .denoiser import Denoiser, forward_diffuse
from .grounding import GroundingBatch, GroundingHead, make_proposals, select_multi, select_single
from .teacher import LatentTeacher
from .tokenizer import BOS, EOS, GROUND, ByteBpeTokenizer
from .trainer import TrainSample, build_scene_cache, ground_prompt, qa_prompt


def normalize_answer(text: str) -> str:
    """Lowercase, strip, collapse internal whitespace."""
    return " ".join(text.lower().split())


def aabb_iou(amin, amax, bmin, bmax) -> float:
    amin, amax = np.asarray(amin, float), np.asarray(amax, float)
    bmin, bmax = np.asarray(bmin, float), np.asarray(bmax, float)
    inter = np.clip(np.minimum(amax, bmax) - np.maximum(amin, bmin), 0.0, None).prod()
    union = (amax - amin).prod() + (bmax - bmin).prod() - inter
    return float(inter / union) if union > 0 else 0.0


def greedy_match_f1(pred_boxes: Sequence, target_boxes: Sequence, iou_threshold: float) -> float:
    """One-to-one greedy matching by descending IoU; F1 over matched pairs."""
    if not pred_boxes and not target_boxes:
        return 1.0
    if not pred_boxes or not target_boxes:
        return 0.0
    pairs = []
    for i, (pmin, pmax) in enumerate(pred_boxes):
        for j, (tmin, tmax) in enumerate(target_boxes):
            pairs.append((aabb_iou(pmin, pmax, tmin, tmax), i, j))
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_p, used_t = set(), set()
    tp = 0
    for iou, i, j in pairs:
        if iou < iou_threshold:
            break
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        tp += 1
    precision = tp / len(pred_boxes)
    recall = tp / len(target_boxes)
    return 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)


@dataclass
class Report:
    run_id: str
    config: dict
    metrics: Dict[str, float]

    def __post_init__(self):
        for key in ("qa_em", "ground_acc_at_0_25", "ground_f1_at_0_25"):
            if key in self.metrics and not (0.0 <= self.metrics[key] <= 1.0):
                raise ValueError(f"{key}={self.metrics[key]} outside [0, 1]")
        for key in ("recon_psnr_view", "recon_psnr_bev"):
            if key in self.metrics and not self.metrics[key] > 0:
                raise ValueError(f"{key}={self.metrics[key]} must be positive")

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def eval_qa(predict: Callable[[int, str], str], samples: Sequence[TrainSample]) -> float:
    """Exact-match fraction under answer normalization.

    predict(scene_index, question) -> answer string.
    """
    if not samples:
        raise ValueError("empty QA split")
    hits = 0
    for s in samples:
        if normalize_answer(predict(s.scene_index, s.question)) == normalize_answer(s.answer):
            hits += 1
    return hits / len(samples)


class ModelPredictor:
    """Greedy decoding over a scene's unmasked visual prefix."""

    def __init__(self, model: MultimodalLm, tokenizer: ByteBpeTokenizer,
                 bundles: Sequence[SceneBundle], max_new_tokens: int = 8):
        self.model = model
        self.tokenizer = tokenizer
        self.bundles = bundles
        self.max_new_tokens = max_new_tokens
        self._visual = {}

    def visual(self, scene_index: int):
        if scene_index not in self._visual:
            frames = self.bundles[scene_index].frames
            self._visual[scene_index] = self.model.embed_video(frames, full_view_mask(len(frames)))
        return self._visual[scene_index]

    def __call__(self, scene_index: int, question: str) -> str:
        prompt = [BOS] + self.tokenizer.encode(qa_prompt(question))
        out = self.model.generate(self.visual(scene_index), prompt,
                                  max_new_tokens=self.max_new_tokens, eos_id=EOS)
        return self.tokenizer.decode(out)


@dataclass
class GroundingRecord:
    expression: str
    predicted_ids: List[int]
    target_ids: List[int]
    ious: List[float]
    kind: str  # single | multi | zero

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def eval_grounding(
    model: MultimodalLm,
    head: GroundingHead,
    tokenizer: ByteBpeTokenizer,
    bundles: Sequence[SceneBundle],
    samples: Sequence[TrainSample],
    iou_threshold: float = 0.25,
) -> Tuple[float, float, List[GroundingRecord]]:
    """(accuracy over single-target, F1 over multi-target, per-sample records).

    Zero-target expressions are recorded but excluded from both metrics.
    """
    single_hits, single_total = 0, 0
    f1s: List[float] = []
    records: List[GroundingRecord] = []
    visual_cache = {}
    for s in samples:
        bundle = bundles[s.scene_index]
        if s.scene_index not in visual_cache:
            frames = bundle.frames
            visual_cache[s.scene_index] = model.embed_video(frames, full_view_mask(len(frames)))
        visual = visual_cache[s.scene_index]
        proposals = make_proposals(bundle.scene)
        prompt = [BOS] + tokenizer.encode(ground_prompt(s.question)) + [GROUND]
        seq = MultimodalSequence(visual=visual,
                                 text_ids=torch.tensor(prompt, dtype=torch.long),
                                 labels=torch.full((len(prompt),), -100, dtype=torch.long))
        with torch.no_grad():
            hidden, _ = model.forward(seq)
            batch = GroundingBatch(proposals=proposals, expression=s.question,
                                   targets=set(s.target_ids),
                                   ground_token_position=visual.tokens.shape[0] + len(prompt) - 1)
            sims = head.similarities(batch, hidden, visual)
        ids = [p.id for p in proposals]
        boxes = {p.id: (p.box_min, p.box_max) for p in proposals}
        targets = sorted(s.target_ids)
        if len(targets) == 1:
            pred = select_single(sims.tolist(), ids)
            iou = aabb_iou(*boxes[pred], *boxes[targets[0]])
            single_hits += iou > iou_threshold
            single_total += 1
            records.append(GroundingRecord(s.question, [pred], targets, [iou], "single"))
        elif len(targets) >= 2:
            probs = torch.softmax(sims, dim=0).tolist()
            preds = sorted(select_multi(probs, ids))
            ious = [max(aabb_iou(*boxes[p], *boxes[t]) for t in targets) for p in preds]
            f1 = greedy_match_f1([boxes[p] for p in preds], [boxes[t] for t in targets], iou_threshold)
            f1s.append(f1)
            records.append(GroundingRecord(s.question, preds, targets, ious, "multi"))
        else:
            records.append(GroundingRecord(s.question, [], [], [], "zero"))
    acc = single_hits / single_total if single_total else 0.0
    f1 = float(np.mean(f1s)) if f1s else 0.0
    return acc, f1, records


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    diff = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2
    if mask is not None:
        diff = diff[mask]
    mse = max(float(diff.mean()), 1e-12)
    return 10.0 * np.log10(1.0 / mse)


def eval_reconstruction(
    model: MultimodalLm,
    denoiser: Denoiser,
    teacher: LatentTeacher,
    bundles: Sequence[SceneBundle],
    scene_indices: Sequence[int],
    t_eval: Optional[int] = None,
    seed: int = 0,
) -> Tuple[float, float]:
    """Single-step denoising PSNR for one masked view and the BEV per scene.

    z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t) at a fixed
    mid-schedule t, decoded by the teacher and compared to the target image
    (BEV restricted to view-observed regions).
    """
    t_eval = t_eval if t_eval is not None else denoiser.schedule.t_diff // 2
    rng = np.random.default_rng(seed)
    ab = denoiser.schedule.alpha_bars[t_eval]
    view_scores, bev_scores = [], []
    for si in scene_indices:
        bundle = bundles[si]
        cache = build_scene_cache(bundle, teacher, model.cfg.patch)
        m = cache.pack.num_views
        bits = np.ones(m, dtype=np.int64)
        bits[0] = 0
        mask = ViewMask(bits=bits, gamma=1.0 / m)
        visual = model.embed_pack(cache.pack, mask)
        seq = MultimodalSequence(visual=visual, text_ids=torch.zeros(0, dtype=torch.long),
                                 labels=torch.zeros(0, dtype=torch.long))
        with torch.no_grad():
            hidden, _ = model.forward(seq)
            xv = hidden[: visual.tokens.shape[0]]
            for z0, target, pixel_mask, scores in (
                (cache.z0_views[0], bundle.frames[0].rgb, None, view_scores),
                (cache.z0_bev, bundle.bev,
                 np.kron(cache.bev_valid_tokens, np.ones((teacher.cfg.stride, teacher.cfg.stride), dtype=bool)),
                 bev_scores),
            ):
                eps = torch.from_numpy(rng.standard_normal(tuple(z0.tokens.shape))).to(denoiser.dtype)
                sample = forward_diffuse(denoiser.schedule, z0.tokens.to(denoiser.dtype), t_eval, eps)
                c = denoiser.make_condition(xv.to(denoiser.dtype), t_eval, source=z0.source)
                eps_hat = denoiser.predict_noise(sample.z_t, c, t_eval)
                z0_hat = (sample.z_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
                from .teacher import LatentGrid

                decoded = teacher.decode(LatentGrid(tokens=z0_hat.float(), stride=z0.stride, source=z0.source))
                scores.append(psnr(decoded, target, pixel_mask))
    return float(np.mean(view_scores)), float(np.mean(bev_scores))


def evaluate_run(
    model: MultimodalLm,
    denoiser: Denoiser,
    head: GroundingHead,
    tokenizer: ByteBpeTokenizer,
    teacher: LatentTeacher,
    bundles: Sequence[SceneBundle],
    scene_indices: Sequence[int],
    run_id: str = "run",
    config: Optional[dict] = None,
    with_reconstruction: bool = True,
) -> Tuple[Report, List[GroundingRecord]]:
    """All metrics over the given scenes; returns the report and records."""
    from .trainer import build_samples

    samples = build_samples(bundles, scene_indices, tokenizer, regime="labeled")
    qa_samples = [s for s in samples if s.tag == "qa"]
    ground_samples = [s for s in samples if s.tag == "ground"]
    predictor = ModelPredictor(model, tokenizer, bundles)
    with torch.no_grad():
        em = eval_qa(predictor, qa_samples)
    acc, f1, records = eval_grounding(model, head, tokenizer, bundles, ground_samples)
    metrics = {"qa_em": em, "ground_acc_at_0_25": acc, "ground_f1_at_0_25": f1}
    if with_reconstruction:
        pv, pb = eval_reconstruction(model, denoiser, teacher, bundles, scene_indices)
        metrics["recon_psnr_view"] = pv
        metrics["recon_psnr_bev"] = pb
    return Report(run_id=run_id, config=config or {}, metrics=metrics), records
