"""Command-line entry points: gen-scenes, train, eval, ablate, report.

Every command exits 0 on success and nonzero with a message on stderr on any
error. All randomness is controlled by --seed / config files (plus the
SCENELM_SEED environment override).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def cmd_gen_scenes(args) -> int:
    from .dataset import generate_dataset, write_dataset

    bundles = generate_dataset(seed=args.seed, num_scenes=args.scenes, num_views=args.frames,
                               resolution=args.resolution, bev_resolution=args.bev_resolution)
    write_dataset(args.out, bundles)
    print(f"wrote {len(bundles)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .dataset import read_dataset
    from .trainer import TrainConfig, Trainer

    cfg = TrainConfig.from_json(args.config)
    bundles = read_dataset(args.data)
    trainer = Trainer(cfg, bundles, args.out)
    log = trainer.train()
    print(f"trained {len(log)} steps; checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import read_dataset
    from .evaluate import evaluate_run
    from .trainer import load_run, train_eval_split

    cfg, model, denoiser, head, tokenizer, teacher = load_run(args.ckpt)
    bundles = read_dataset(args.data)
    train_idx, eval_idx = train_eval_split(len(bundles), cfg.eval_fraction)
    indices = train_idx if args.split == "train" else eval_idx
    if not indices:
        raise ValueError(f"split {args.split!r} is empty for this dataset/config")
    report, records = evaluate_run(model, denoiser, head, tokenizer, teacher, bundles,
                                   indices, run_id=Path(args.ckpt).name,
                                   config=json.loads(Path(args.ckpt, "config.json").read_text()))
    out_dir = Path(args.out) if args.out else Path(args.ckpt)
    report.to_json(out_dir / "metrics.json")
    with open(out_dir / "grounding_records.jsonl", "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    for k, v in sorted(report.metrics.items()):
        print(f"{k}: {v:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate, semi_protocol
    from .dataset import read_dataset
    from .trainer import TrainConfig, train_eval_split

    grid = json.loads(Path(args.grid).read_text())
    base = TrainConfig.from_dict(grid.get("config", {}))
    bundles = read_dataset(grid["data"])
    train_idx, eval_idx = train_eval_split(len(bundles), grid.get("eval_fraction", 0.2))
    train_bundles = [bundles[i] for i in train_idx]
    eval_bundles = [bundles[i] for i in eval_idx]
    protocol = grid.get("protocol", "pretext")
    if protocol == "pretext":
        rows = ablate(base, train_bundles, eval_bundles, args.out,
                      repeats=grid.get("repeats", 5), arms=grid.get("arms"))
    elif protocol == "semi":
        rows = semi_protocol(base, train_bundles, eval_bundles, args.out,
                             seeds=grid.get("seeds", [0, 1, 2, 3, 4]), arms=grid.get("arms"))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    for row in rows:
        print(row["arm"], {k: round(v, 4) for k, v in row.items() if k.endswith("_mean")})
    return 0


def cmd_report(args) -> int:
    from .reporting import report

    written = report(args.run)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenelm")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate a synthetic multi-view RGB-D dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--bev-resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation or semi-supervised grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render report and plots for a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
