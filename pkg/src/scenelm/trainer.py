"""Training loop: batch construction, loss routing, scheduling, logging.

Routing rules
-------------
labeled qa/caption   -> text CE, plus the 3D reconstruction losses on steps
                        where step % delta_t == 0 (step 0 included)
labeled ground       -> grounding loss only
unlabeled (any tag)  -> reconstruction losses on delta_t steps, else nothing

On steps where any masked-view objective fires, a single forward pass over
masked inputs serves the text and reconstruction losses together. The
vanilla (identity-transform) objective always runs on an unmasked forward.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from .backbone import (
    BackboneConfig,
    MultimodalLm,
    MultimodalSequence,
    ScenePack,
    ViewMask,
    build_scene_pack,
    full_view_mask,
    save_backbone,
    text_loss,
)
from .dataset import SceneBundle
from .denoiser import Denoiser, DenoiserConfig, cross_view_loss, global_view_loss, vanilla_loss
from .geometry import blank_mask, project_to_bev, unproject_frame
from .grounding import GroundingBatch, GroundingHead, ObjectProposal, grounding_loss, make_proposals
from .scenes import scene_bev_config
from .teacher import LatentGrid, LatentTeacher, TeacherConfig, save_teacher, teacher_corpus, train_teacher
from .tokenizer import BOS, EOS, GROUND, ByteBpeTokenizer

SEED_ENV_VAR = "SCENELM_SEED"
LOSS_NAMES = ("text", "vanilla2d", "cross", "global", "ground")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.25
    delta_t: int = 4
    lambda_cross: float = 0.5
    lambda_global: float = 0.5
    lambda_vanilla: float = 0.5
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 20
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    semi_supervised_fraction: float = 1.0  # fraction of train scenes with text labels
    frames_per_scene: int = 8
    eval_fraction: float = 0.2
    use_cross: bool = True
    use_global: bool = True
    use_vanilla: bool = False
    schedule_global_with_cross: bool = True
    freeze_patch_embed: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    teacher_path: Optional[str] = None
    max_answer_tokens: int = 8

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.delta_t < 1:
            raise ValueError(f"delta_t must be >= 1, got {self.delta_t}")
        if not (0.0 <= self.semi_supervised_fraction <= 1.0):
            raise ValueError("semi_supervised_fraction must be in [0, 1]")

    def to_json(self, path):
        blob = asdict(self)
        Path(path).write_text(json.dumps(blob, indent=1))

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        blob = json.loads(Path(path).read_text())
        return cls.from_dict(blob)

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        blob = dict(blob)
        for key, sub in (("backbone", BackboneConfig), ("denoiser", DenoiserConfig), ("teacher", TeacherConfig)):
            if key in blob and isinstance(blob[key], dict):
                blob[key] = sub(**blob[key])
        cfg = cls(**blob)
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            cfg.seed = int(env_seed)
        return cfg


@dataclass
class LossBundle:
    """One structured loss-log record per optimizer step.

    flags record which objectives were scheduled at this step (the delta_t
    bookkeeping plus enabled arms for the reconstruction losses; presence in
    the batch for text/ground); values hold the batch-mean losses, None when
    no sample carried the loss this step.
    """

    step: int
    values: Dict[str, Optional[float]]
    flags: Dict[str, bool]
    gamma: float
    masks: List[str]
    lr: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "values": self.values, "flags": self.flags,
                           "gamma": self.gamma, "masks": self.masks, "lr": self.lr})

    @classmethod
    def from_json(cls, line: str) -> "LossBundle":
        d = json.loads(line)
        return cls(step=d["step"], values=d["values"], flags=d["flags"],
                   gamma=d["gamma"], masks=d["masks"], lr=d["lr"])


def sample_view_mask(num_views: int, gamma: float, rng: np.random.Generator) -> ViewMask:
    """Exactly round(gamma * M) masked views, uniform without replacement."""
    if num_views < 1:
        raise ValueError("need at least one view")
    n_masked = int(round(gamma * num_views))
    if n_masked >= num_views:
        raise ValueError(f"gamma {gamma} would mask all {num_views} views")
    bits = np.ones(num_views, dtype=np.int64)
    if n_masked:
        bits[rng.choice(num_views, size=n_masked, replace=False)] = 0
    return ViewMask(bits=bits, gamma=gamma)


def should_apply_3d(step: int, delta_t: int) -> bool:
    """3D objectives fire every delta_t steps, step 0 included."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return step % delta_t == 0


def route_losses(tag: str, regime: str, step: int, delta_t: int) -> Set[str]:
    """Default routing: which named losses a sample carries at this step."""
    if tag not in ("qa", "caption", "ground"):
        raise ValueError(f"unknown task tag {tag!r}")
    if regime not in ("labeled", "unlabeled"):
        raise ValueError(f"unknown regime {regime!r}")
    recon = {"cross", "global"} if should_apply_3d(step, delta_t) else set()
    if regime == "unlabeled":
        return recon
    if tag == "ground":
        return {"ground"}
    return {"text"} | recon


def split_semi(scene_indices: Sequence[int], fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Disjoint scene-level split into (labeled, unlabeled); deterministic."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    indices = list(scene_indices)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(indices))
    n_labeled = int(round(fraction * len(indices)))
    if n_labeled == 0 or n_labeled == len(indices):
        raise ValueError(f"fraction {fraction} yields an empty subset for {len(indices)} scenes")
    labeled = sorted(indices[k] for k in order[:n_labeled])
    unlabeled = sorted(indices[k] for k in order[n_labeled:])
    return labeled, unlabeled


@dataclass
class TrainSample:
    scene_index: int
    tag: str
    regime: str
    prompt_ids: List[int]
    answer_ids: List[int]
    target_ids: frozenset = frozenset()
    question: str = ""
    answer: str = ""


def qa_prompt(question: str) -> str:
    return f"question: {question} answer:"


def caption_prompt(center: np.ndarray) -> str:
    return f"describe the object at ({center[0]:.1f},{center[1]:.1f}):"


def ground_prompt(expression: str) -> str:
    return f"locate: {expression}"


def annotation_texts(bundles: Sequence[SceneBundle]) -> List[str]:
    """Tokenizer training corpus: every prompt and answer the trainer emits."""
    texts = []
    for b in bundles:
        for q, a in b.annotations.qa:
            texts.append(qa_prompt(q))
            texts.append(" " + a)
        for oid, cap in b.annotations.captions:
            texts.append(caption_prompt(b.scene.object_by_id(oid).center))
            texts.append(" " + cap)
        for expr, _ in b.annotations.grounding:
            texts.append(ground_prompt(expr))
    return texts


def build_samples(
    bundles: Sequence[SceneBundle],
    scene_indices: Sequence[int],
    tokenizer: ByteBpeTokenizer,
    regime: str = "labeled",
    unlabeled_repeats: int = 6,
) -> List[TrainSample]:
    """Expand annotations into tokenized samples.

    Unlabeled scenes contribute vision-only samples (no text at all), repeated
    so they appear in the batch stream about as often as a labeled scene's
    annotation records would.
    """
    samples: List[TrainSample] = []
    for si in scene_indices:
        b = bundles[si]
        if regime == "unlabeled":
            for _ in range(unlabeled_repeats):
                samples.append(TrainSample(scene_index=si, tag="qa", regime="unlabeled",
                                           prompt_ids=[], answer_ids=[]))
            continue
        for q, a in b.annotations.qa:
            samples.append(TrainSample(
                scene_index=si, tag="qa", regime="labeled",
                prompt_ids=[BOS] + tokenizer.encode(qa_prompt(q)),
                answer_ids=tokenizer.encode(" " + a) + [EOS],
                question=q, answer=a,
            ))
        for oid, cap in b.annotations.captions:
            center = b.scene.object_by_id(oid).center
            samples.append(TrainSample(
                scene_index=si, tag="caption", regime="labeled",
                prompt_ids=[BOS] + tokenizer.encode(caption_prompt(center)),
                answer_ids=tokenizer.encode(" " + cap) + [EOS],
            ))
        for expr, targets in b.annotations.grounding:
            samples.append(TrainSample(
                scene_index=si, tag="ground", regime="labeled",
                prompt_ids=[BOS] + tokenizer.encode(ground_prompt(expr)) + [GROUND],
                answer_ids=[], target_ids=frozenset(targets), question=expr,
            ))
    return samples


@dataclass
class SceneCache:
    """Per-scene precomputation: patch inputs, frozen-teacher targets,
    BEV blank filter, grounding proposals."""

    pack: ScenePack
    z0_views: List[LatentGrid]
    z0_bev: LatentGrid
    bev_valid_tokens: np.ndarray
    proposals: List[ObjectProposal]


def build_scene_cache(bundle: SceneBundle, teacher: LatentTeacher, patch: int) -> SceneCache:
    pack = build_scene_pack(bundle.frames, patch=patch)
    z0_views = [teacher.encode(f.rgb, source="view") for f in bundle.frames]
    z0_bev = teacher.encode(bundle.bev, source="bev")
    # blank filter from what the views actually observed: splat every
    # unprojected point into the BEV window, then mark observed tokens
    cfg = scene_bev_config(bundle.scene, resolution=bundle.bev.shape[0])
    pts, cols = [], []
    for f in bundle.frames:
        pm = unproject_frame(f)
        pts.append(pm.coords[pm.valid])
        cols.append(f.rgb[pm.valid])
    splat, occ = project_to_bev(np.concatenate(pts), np.concatenate(cols), cfg)
    valid = blank_mask(splat, occ, stride=teacher.cfg.stride)
    return SceneCache(pack=pack, z0_views=z0_views, z0_bev=z0_bev,
                      bev_valid_tokens=valid, proposals=make_proposals(bundle.scene))


def train_eval_split(n_scenes: int, eval_fraction: float) -> Tuple[List[int], List[int]]:
    """Deterministic index split: the trailing fraction is held out."""
    n_eval = max(1, int(math.ceil(n_scenes * eval_fraction))) if eval_fraction > 0 else 0
    train = list(range(n_scenes - n_eval))
    evals = list(range(n_scenes - n_eval, n_scenes))
    if not train:
        raise ValueError("eval fraction leaves no training scenes")
    return train, evals


class Trainer:
    """Owns the models, the optimizer, and all RNG streams for one run."""

    def __init__(self, cfg: TrainConfig, bundles: Sequence[SceneBundle], out_dir,
                 teacher: Optional[LatentTeacher] = None):
        self.cfg = cfg
        self.bundles = list(bundles)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.set_num_threads(1)  # deterministic mode: single worker everywhere

        self.train_indices, self.eval_indices = train_eval_split(len(self.bundles), cfg.eval_fraction)

        if teacher is not None:
            self.teacher = teacher
        elif cfg.teacher_path:
            from .teacher import load_teacher

            self.teacher = load_teacher(cfg.teacher_path)
        else:
            corpus = teacher_corpus([self.bundles[i] for i in self.train_indices])
            self.teacher = train_teacher(corpus, cfg.teacher)
        save_teacher(self.teacher, self.out_dir / "teacher.pt")

        train_bundles = [self.bundles[i] for i in self.train_indices]
        self.tokenizer = ByteBpeTokenizer.train(annotation_texts(train_bundles), cfg.backbone.vocab_size)
        self.tokenizer.save(self.out_dir / "tokenizer.json")

        if cfg.semi_supervised_fraction < 1.0:
            labeled, unlabeled = split_semi(self.train_indices, cfg.semi_supervised_fraction, cfg.seed)
        else:
            labeled, unlabeled = list(self.train_indices), []
        self.labeled_indices, self.unlabeled_indices = labeled, unlabeled
        self.samples = build_samples(self.bundles, labeled, self.tokenizer, regime="labeled")
        self.samples += build_samples(self.bundles, unlabeled, self.tokenizer, regime="unlabeled")

        torch.manual_seed(cfg.seed)
        self.model = MultimodalLm(cfg.backbone)
        self.denoiser = Denoiser(cfg.denoiser)
        self.head = GroundingHead()
        if cfg.freeze_patch_embed:
            for p in self.model.patch_embed.parameters():
                p.requires_grad_(False)

        self._cache: Dict[int, SceneCache] = {}
        self.rng_data = np.random.default_rng(cfg.seed)
        self.rng_mask = np.random.default_rng(cfg.seed + 1)
        self.rng_diff = np.random.default_rng(cfg.seed + 2)

    # -- helpers -------------------------------------------------------------

    def scene_cache(self, scene_index: int) -> SceneCache:
        if scene_index not in self._cache:
            self._cache[scene_index] = build_scene_cache(
                self.bundles[scene_index], self.teacher, self.cfg.backbone.patch
            )
        return self._cache[scene_index]

    def parameters(self):
        params = [p for p in self.model.parameters() if p.requires_grad]
        params += list(self.denoiser.parameters())
        params += list(self.head.parameters())
        return params

    def _lr_at(self, step: int) -> float:
        cfg = self.cfg
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        if cfg.steps <= cfg.warmup_steps:
            return cfg.lr
        progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    def active_losses(self, sample: TrainSample, step: int) -> Set[str]:
        """Default routing filtered by the enabled pretext-task arms."""
        cfg = self.cfg
        routed = route_losses(sample.tag, sample.regime, step, cfg.delta_t)
        active = set(routed) - {"cross", "global"}
        fires = should_apply_3d(step, cfg.delta_t)
        recon_eligible = sample.regime == "unlabeled" or sample.tag != "ground"
        if recon_eligible:
            if cfg.use_cross and fires:
                active.add("cross")
            if cfg.use_global and (fires if cfg.schedule_global_with_cross else True):
                active.add("global")
            if cfg.use_vanilla and fires:
                active.add("vanilla2d")
        return active

    def _sequence(self, sample: TrainSample, visual) -> MultimodalSequence:
        ids = sample.prompt_ids + sample.answer_ids
        labels = [-100] * len(sample.prompt_ids) + list(sample.answer_ids)
        return MultimodalSequence(
            visual=visual,
            text_ids=torch.tensor(ids, dtype=torch.long),
            labels=torch.tensor(labels, dtype=torch.long),
        )

    def _sample_losses(self, sample: TrainSample, step: int):
        """Forward one sample; returns {loss name: tensor} and the mask used."""
        cfg = self.cfg
        cache = self.scene_cache(sample.scene_index)
        active = self.active_losses(sample, step)
        m = cache.pack.num_views

        needs_masking = bool({"cross", "global"} & active) and cfg.gamma > 0
        mask = sample_view_mask(m, cfg.gamma, self.rng_mask) if needs_masking else full_view_mask(m)

        visual = self.model.embed_pack(cache.pack, mask)
        seq = self._sequence(sample, visual)
        hidden, logits = self.model.forward(seq)
        n = visual.tokens.shape[0]
        x_visual = hidden[:n]

        out: Dict[str, torch.Tensor] = {}
        if "text" in active:
            loss, applied = text_loss(logits, seq.labels)
            if applied:
                out["text"] = loss
        if "cross" in active:
            loss, applied = cross_view_loss(self.denoiser, cache.z0_views, mask, x_visual, rng=self.rng_diff)
            if applied:
                out["cross"] = loss
        if "global" in active:
            loss, applied = global_view_loss(self.denoiser, cache.z0_bev, cache.bev_valid_tokens,
                                             x_visual, rng=self.rng_diff)
            if applied:
                out["global"] = loss
        if "vanilla2d" in active:
            # identity input transform: reuse the forward only when unmasked
            if mask.masked_indices.size == 0:
                xv_plain = x_visual
            else:
                visual_plain = self.model.embed_pack(cache.pack, full_view_mask(m))
                hidden_plain, _ = self.model.forward(self._sequence(sample, visual_plain))
                xv_plain = hidden_plain[:n]
            loss, applied = vanilla_loss(self.denoiser, cache.z0_views, xv_plain, rng=self.rng_diff)
            if applied:
                out["vanilla2d"] = loss
        if "ground" in active:
            gb = GroundingBatch(proposals=cache.proposals, expression=sample.question,
                                targets=set(sample.target_ids),
                                ground_token_position=n + len(sample.prompt_ids) - 1)
            loss, applied = grounding_loss(self.head, gb, hidden, visual)
            if applied:
                out["ground"] = loss
        return out, mask

    # -- the loop --------------------------------------------------------------

    def train(self) -> List[LossBundle]:
        cfg = self.cfg
        if not self.samples:
            raise ValueError("no training samples")
        opt = torch.optim.AdamW(self.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        log_path = self.out_dir / "loss_log.jsonl"
        weights = {"text": 1.0, "cross": cfg.lambda_cross, "global": cfg.lambda_global,
                   "vanilla2d": cfg.lambda_vanilla, "ground": 1.0}
        log: List[LossBundle] = []
        order: List[int] = []
        with open(log_path, "w") as log_file:
            for step in range(cfg.steps):
                while len(order) < cfg.batch_size:
                    order.extend(self.rng_data.permutation(len(self.samples)).tolist())
                batch = [self.samples[order.pop(0)] for _ in range(cfg.batch_size)]

                lr = self._lr_at(step)
                for group in opt.param_groups:
                    group["lr"] = lr

                per_loss: Dict[str, List[torch.Tensor]] = {k: [] for k in LOSS_NAMES}
                masks: List[str] = []
                for sample in batch:
                    losses, mask = self._sample_losses(sample, step)
                    masks.append("".join(str(int(b)) for b in mask.bits))
                    for name, value in losses.items():
                        per_loss[name].append(value)

                fires = should_apply_3d(step, cfg.delta_t)
                flags: Dict[str, bool] = {
                    "text": bool(per_loss["text"]),
                    "ground": bool(per_loss["ground"]),
                    "cross": cfg.use_cross and cfg.gamma > 0 and fires,
                    "global": cfg.use_global and (fires if cfg.schedule_global_with_cross else True),
                    "vanilla2d": cfg.use_vanilla and fires,
                }
                total = None
                values: Dict[str, Optional[float]] = {}
                for name in LOSS_NAMES:
                    entries = per_loss[name]
                    if not entries:
                        values[name] = None
                        continue
                    mean = torch.stack(entries).mean()
                    values[name] = float(mean.detach())
                    term = weights[name] * mean
                    total = term if total is None else total + term

                if total is not None:
                    if not torch.isfinite(total):
                        self._dump_diagnostics(step, batch, values)
                        raise TrainingDivergedError(
                            f"non-finite loss at step {step}; batch dumped to {self.out_dir / 'diverged_batch.json'}"
                        )
                    opt.zero_grad()
                    total.backward()
                    opt.step()

                bundle = LossBundle(step=step, values=values, flags=flags,
                                    gamma=cfg.gamma, masks=masks, lr=lr)
                log.append(bundle)
                log_file.write(bundle.to_json() + "\n")

        self.save_checkpoint()
        return log

    def _dump_diagnostics(self, step, batch, values):
        blob = {"step": step, "values": values,
                "batch": [{"scene": s.scene_index, "tag": s.tag, "regime": s.regime,
                           "question": s.question} for s in batch]}
        (self.out_dir / "diverged_batch.json").write_text(json.dumps(blob, indent=1))

    def save_checkpoint(self):
        save_backbone(self.model, self.out_dir / "model.pt")
        torch.save({"denoiser_config": asdict(self.cfg.denoiser),
                    "denoiser": self.denoiser.state_dict(),
                    "grounding_head": self.head.state_dict()},
                   self.out_dir / "heads.pt")
        self.cfg.to_json(self.out_dir / "config.json")


def load_run(run_dir):
    """Reload (config, model, denoiser, head, tokenizer, teacher) from a run."""
    from .backbone import load_backbone
    from .teacher import load_teacher

    run_dir = Path(run_dir)
    cfg = TrainConfig.from_json(run_dir / "config.json")
    model = load_backbone(run_dir / "model.pt")
    blob = torch.load(run_dir / "heads.pt", map_location="cpu", weights_only=False)
    denoiser = Denoiser(DenoiserConfig(**blob["denoiser_config"]))
    denoiser.load_state_dict(blob["denoiser"])
    head = GroundingHead()
    head.load_state_dict(blob["grounding_head"])
    tokenizer = ByteBpeTokenizer.load(run_dir / "tokenizer.json")
    teacher = load_teacher(run_dir / "teacher.pt")
    return cfg, model, denoiser, head, tokenizer, teacher


def read_loss_log(path) -> List[LossBundle]:
    return [LossBundle.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
