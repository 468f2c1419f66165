#!/usr/bin/env python3
"""Pilot run for tuning the ablation schedule; prints per-cell zero-shot mAP."""

import argparse
import os
import sys
import time

from tinyovd.ablation import AblateConfig, ablate
from tinyovd.scenes import Dataset, SplitSpec, generate_dataset, write_dataset


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="/tmp/pilot")
    ap.add_argument("--train-scenes", type=int, default=800)
    ap.add_argument("--eval-scenes", type=int, default=120)
    ap.add_argument("--stage1-iterations", type=int, default=1500)
    ap.add_argument("--stage2-iterations", type=int, default=500)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--lr", type=float, default=1e-4)
    args = ap.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    split = SplitSpec.default()
    train_path = os.path.join(args.out_dir, "train.jsonl")
    held_path = os.path.join(args.out_dir, "held.jsonl")
    if not os.path.exists(train_path):
        t0 = time.time()
        write_dataset(
            Dataset(scenes=generate_dataset(split.train_combos, args.train_scenes, 0), split=split, role="train"),
            train_path,
        )
        write_dataset(
            Dataset(scenes=generate_dataset(split.heldout_combos, args.eval_scenes, 1), split=split, role="heldout"),
            held_path,
        )
        print(f"datasets: {time.time()-t0:.0f}s", flush=True)

    cfg = AblateConfig(
        train_data=train_path,
        heldout_data=held_path,
        out_dir=args.out_dir,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        stage1_iterations=args.stage1_iterations,
        stage2_iterations=args.stage2_iterations,
        lr=args.lr,
    )
    t0 = time.time()
    results = ablate(cfg)
    for r in results:
        print(f"{r.cell.name:10s} maps={['%.4f' % m for m in r.seed_maps]} mean={r.mean:.4f} err={r.error}", flush=True)
    print(f"total {time.time()-t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
