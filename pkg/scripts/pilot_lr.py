#!/usr/bin/env python3
"""Learning-rate pilot: train one config, report train- and held-out mAP."""

import argparse
import sys
import time

from tinyovd.checkpoint import load_checkpoint
from tinyovd.evaluator import MetricAccumulator, zero_shot_eval
from tinyovd.scenes import generate_dataset, read_dataset
from tinyovd.textspace import prompt_set_for
from tinyovd.trainer import TrainConfig, run_stage


def train_map(ck_path: str, n_scenes: int = 40) -> float:
    ck = load_checkpoint(ck_path)
    model = ck.build_model()
    cats = list(ck.split.train_combos)
    prompts = prompt_set_for(ck.space, cats)
    acc = MetricAccumulator(categories=cats)
    for sc in generate_dataset(ck.split.train_combos, n_scenes, 99):
        dets = model.inference(sc.image, prompts.embeddings)
        expanded = [(d.box, cats[pi], float(d.scores[pi])) for d in dets for pi in range(len(cats))]
        acc.add_image(expanded, [(b, (s, c)) for b, s, c in sc.annotations])
    return acc.compute().map_50_95


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--train-data", default="/tmp/pilot1/train.jsonl")
    ap.add_argument("--heldout-data", default="/tmp/pilot1/held.jsonl")
    ap.add_argument("--iterations", type=int, default=1500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="/tmp/pilot_lr.ckpt")
    ap.add_argument("--metrics", default="/tmp/pilot_lr.csv")
    ap.add_argument("--aux-loss", default="dwcl")
    ap.add_argument("--no-o2m", action="store_true")
    args = ap.parse_args()

    cfg = TrainConfig(
        stage=1,
        iterations=args.iterations,
        lr=args.lr,
        seed=args.seed,
        use_o2m=not args.no_o2m,
        aux_loss=args.aux_loss,
        train_data=args.train_data,
        out_checkpoint=args.out,
        metrics_csv=args.metrics,
    )
    t0 = time.time()
    run_stage(cfg)
    held = read_dataset(args.heldout_data)
    zs = zero_shot_eval(args.out, held)
    tm = train_map(args.out)
    print(
        f"lr={args.lr} iters={args.iterations} o2m={cfg.use_o2m}: "
        f"train mAP={tm:.4f} heldout mAP={zs.map_50_95:.4f} ({time.time()-t0:.0f}s)",
        flush=True,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
