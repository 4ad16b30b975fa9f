"""Ablation and semi-supervised protocols over the synthetic benchmark.

Every arm of a protocol trains on identical data with identical seeds and a
shared frozen teacher; arms differ only in which reconstruction objectives
are enabled (or which scenes carry text labels).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dataset import SceneBundle
from .evaluate import evaluate_run
from .teacher import LatentTeacher, teacher_corpus, train_teacher
from .trainer import TrainConfig, Trainer, split_semi

# (use_vanilla, use_cross, use_global) per arm, in presentation order
ABLATION_ARMS = {
    "baseline": (False, False, False),
    "vanilla": (True, False, False),
    "cross": (False, True, False),
    "global": (False, False, True),
    "both": (False, True, True),
}


def run_arm(
    cfg: TrainConfig,
    train_bundles: Sequence[SceneBundle],
    eval_bundles: Sequence[SceneBundle],
    out_dir,
    teacher: LatentTeacher,
    run_id: str,
) -> Dict[str, float]:
    """Train one configuration and evaluate it on the shared eval scenes."""
    trainer = Trainer(cfg, train_bundles, out_dir, teacher=teacher)
    trainer.train()
    report, _ = evaluate_run(
        trainer.model, trainer.denoiser, trainer.head, trainer.tokenizer, trainer.teacher,
        eval_bundles, list(range(len(eval_bundles))), run_id=run_id,
        with_reconstruction=False,
    )
    report.to_json(Path(out_dir) / "metrics.json")
    return report.metrics


def _arm_config(base: TrainConfig, flags, seed: int) -> TrainConfig:
    cfg = dataclasses.replace(base, seed=seed, eval_fraction=0.0)
    cfg.use_vanilla, cfg.use_cross, cfg.use_global = flags
    return cfg


def shared_teacher(train_bundles: Sequence[SceneBundle], base: TrainConfig) -> LatentTeacher:
    return train_teacher(teacher_corpus(train_bundles), base.teacher)


def ablate(
    base: TrainConfig,
    train_bundles: Sequence[SceneBundle],
    eval_bundles: Sequence[SceneBundle],
    out_root,
    repeats: int = 5,
    teacher: Optional[LatentTeacher] = None,
    arms: Optional[Sequence[str]] = None,
) -> List[dict]:
    """Five-arm pretext-task ablation; rows ordered baseline, +vanilla,
    +cross-view, +global-view, +both. Each repeat r uses seed base.seed + r
    for every arm, so arms see identical data order."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    teacher = teacher or shared_teacher(train_bundles, base)
    arm_names = list(arms) if arms else list(ABLATION_ARMS)
    rows = []
    for name in arm_names:
        flags = ABLATION_ARMS[name]
        per_metric: Dict[str, List[float]] = {}
        for r in range(repeats):
            cfg = _arm_config(base, flags, base.seed + r)
            metrics = run_arm(cfg, train_bundles, eval_bundles,
                              out_root / f"{name}_r{r}", teacher, f"{name}_r{r}")
            for k, v in metrics.items():
                per_metric.setdefault(k, []).append(v)
        row = {"arm": name}
        for k, vals in per_metric.items():
            row[f"{k}_mean"] = float(np.mean(vals))
            row[f"{k}_std"] = float(np.std(vals))
            row[f"{k}_runs"] = vals
        rows.append(row)
    (out_root / "ablation.json").write_text(json.dumps(rows, indent=1))
    (out_root / "ablation_table.txt").write_text(format_table(rows))
    return rows


def format_table(rows: List[dict]) -> str:
    metrics = ("qa_em", "ground_acc_at_0_25", "ground_f1_at_0_25")
    header = f"{'arm':<10}" + "".join(f"{m:>28}" for m in metrics)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = "".join(
            f"{row.get(m + '_mean', float('nan')):>20.4f} ±{row.get(m + '_std', float('nan')):.4f}"
            for m in metrics
        )
        lines.append(f"{row['arm']:<10}" + cells)
    return "\n".join(lines) + "\n"


SEMI_ARMS = ("text_50", "text_50_plus_3d", "text_50_plus_3d_on_rest", "text_100")


def semi_protocol(
    base: TrainConfig,
    train_bundles: Sequence[SceneBundle],
    eval_bundles: Sequence[SceneBundle],
    out_root,
    seeds: Sequence[int],
    teacher: Optional[LatentTeacher] = None,
    arms: Optional[Sequence[str]] = None,
) -> List[dict]:
    """Four-row semi-supervised protocol on a fixed 50/50 scene split:
    text-only on the labeled half, +3D on the same half, +3D on the
    unlabeled half as well, and the fully-labeled text-only reference."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    teacher = teacher or shared_teacher(train_bundles, base)
    arm_names = list(arms) if arms else list(SEMI_ARMS)
    rows = []
    for name in arm_names:
        per_metric: Dict[str, List[float]] = {}
        for seed in seeds:
            labeled, _ = split_semi(range(len(train_bundles)), 0.5, seed)
            half = [train_bundles[i] for i in labeled]
            if name == "text_50":
                cfg = _arm_config(base, (False, False, False), seed)
                bundles = half
            elif name == "text_50_plus_3d":
                cfg = _arm_config(base, (False, True, True), seed)
                bundles = half
            elif name == "text_50_plus_3d_on_rest":
                cfg = _arm_config(base, (False, True, True), seed)
                cfg = dataclasses.replace(cfg, semi_supervised_fraction=0.5)
                bundles = train_bundles
            elif name == "text_100":
                cfg = _arm_config(base, (False, False, False), seed)
                bundles = train_bundles
            else:
                raise ValueError(f"unknown semi arm {name!r}")
            metrics = run_arm(cfg, bundles, eval_bundles,
                              out_root / f"{name}_s{seed}", teacher, f"{name}_s{seed}")
            for k, v in metrics.items():
                per_metric.setdefault(k, []).append(v)
        row = {"arm": name}
        for k, vals in per_metric.items():
            row[f"{k}_mean"] = float(np.mean(vals))
            row[f"{k}_std"] = float(np.std(vals))
            row[f"{k}_runs"] = vals
        rows.append(row)
    (out_root / "semi.json").write_text(json.dumps(rows, indent=1))
    return rows
