"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 a check
(gradcheck) ran and failed. The TINYOVD_OUT environment variable supplies
the default output directory; explicit paths win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .ablation import AblateConfig, ablate
from .checkpoint import load_checkpoint
from .errors import ConfigError, TinyOvdError
from .evaluator import zero_shot_eval
from .gradcheck import run_gradcheck
from .losses import DwclParams, FocalParams, negative_term, positive_term
from .scenes import Dataset, SplitSpec, generate_dataset, write_dataset
from .trainer import TrainConfig, config_from_dict, run_stage


class CliError(Exception):
    """Validation failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def out_dir_default() -> str:
    return os.environ.get("TINYOVD_OUT", ".")


def _provenance(cmd: str, args: dict) -> str:
    parts = [f"tinyovd {cmd}"]
    for k in sorted(args):
        v = args[k]
        if v is None or k in ("func", "cmd"):
            continue
        parts.append(f"--{k.replace('_', '-')}={v}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# losscurve


def dwcl_curve_value(p, iou: float, params: DwclParams, normalizer: float):
    """Positive-branch difficulty-weighted loss with a fixed alpha normalizer."""
    alpha = (1.0 - iou) / normalizer
    gamma = params.beta1 * (1.0 - iou) + params.beta2
    loss, _ = positive_term(p, alpha, gamma)
    return loss


def losscurve_tables(
    focal: FocalParams = FocalParams(),
    dwcl: DwclParams = DwclParams(),
    iou: float = 0.5,
    normalizer: float = 0.25,
    p_points: int = 99,
    iou_points: int = 50,
):
    """(p, focal, dwcl) curve rows and (p, iou, loss) surface rows."""
    ps = np.arange(1, p_points + 1) / (p_points + 1.0)
    focal_vals, _ = positive_term(ps, focal.alpha, focal.gamma)
    dwcl_vals = dwcl_curve_value(ps, iou, dwcl, normalizer)
    curve = list(zip(ps, focal_vals, dwcl_vals))
    ious = np.arange(iou_points) / iou_points  # [0, 1) grid
    surface = []
    for i in ious:
        vals = dwcl_curve_value(ps, float(i), dwcl, normalizer)
        surface.extend((float(p), float(i), float(v)) for p, v in zip(ps, vals))
    return curve, surface


def _cmd_losscurve(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    prov = _provenance("losscurve", vars(args))
    dwcl = DwclParams(beta1=args.beta1, beta2=args.beta2)
    curve, surface = losscurve_tables(dwcl=dwcl, iou=args.iou, normalizer=args.normalizer)
    curve_path = os.path.join(args.out_dir, "losscurve.csv")
    with open(curve_path, "w", encoding="utf-8") as f:
        f.write(f"# {prov}\n")
        f.write("p,focal,dwcl\n")
        for p, fv, dv in curve:
            f.write(f"{p!r},{fv!r},{dv!r}\n")
    surface_path = os.path.join(args.out_dir, "losssurface.csv")
    with open(surface_path, "w", encoding="utf-8") as f:
        f.write(f"# {prov}\n")
        f.write("p,iou,dwcl\n")
        for p, i, v in surface:
            f.write(f"{p!r},{i!r},{v!r}\n")
    print(f"wrote {curve_path} and {surface_path}")
    return 0


# ---------------------------------------------------------------------------
# pipeline commands


def _cmd_gen_data(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    split = SplitSpec.default()
    split.validate()
    train = generate_dataset(split.train_combos, args.train_scenes, args.seed)
    held = generate_dataset(split.heldout_combos, args.eval_scenes, args.seed + 1)
    train_path = os.path.join(args.out_dir, "train.jsonl")
    held_path = os.path.join(args.out_dir, "heldout.jsonl")
    write_dataset(Dataset(scenes=train, split=split, role="train"), train_path)
    write_dataset(Dataset(scenes=held, split=split, role="heldout"), held_path)
    print(f"wrote {train_path} ({args.train_scenes} scenes) and {held_path} ({args.eval_scenes} scenes)")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = config_from_dict(json.load(f))
    else:
        cfg = TrainConfig()
    overrides = {
        "stage": args.stage,
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "lr_drop_fraction": args.lr_drop_fraction,
        "num_negative_prompts": args.num_negative_prompts,
        "seed": args.seed,
        "train_data": args.train_data,
        "init_from": args.init_from,
        "out_checkpoint": args.out,
        "metrics_csv": args.metrics_csv,
        "aux_loss": args.aux_loss,
    }
    for k, v in overrides.items():
        if v is not None:
            cfg = replace(cfg, **{k: v})
    if args.no_o2m:
        cfg = replace(cfg, use_o2m=False)
    if not cfg.out_checkpoint:
        cfg = replace(cfg, out_checkpoint=os.path.join(out_dir_default(), "model.ckpt"))
    if cfg.stage == 2 and not cfg.init_from:
        raise CliError("--init-from is required when --stage 2")
    return cfg


def _cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    prov = _provenance("train", vars(args))
    path = run_stage(cfg, resume_from=args.resume_from, provenance=prov)
    print(f"wrote {path}")
    return 0


def _cmd_eval(args) -> int:
    from .scenes import read_dataset

    dataset = read_dataset(args.data)
    result = zero_shot_eval(args.checkpoint, dataset, max_scenes=args.max_scenes)
    print(result.report())
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as f:
            f.write(f"# {_provenance('eval', vars(args))}\n")
            f.write("map_50_95,map_50,map_75,num_images,num_gt\n")
            f.write(result.csv_row() + "\n")
        print(f"wrote {args.out_csv}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = AblateConfig(
        train_data=args.train_data,
        heldout_data=args.heldout_data,
        out_dir=args.out_dir,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        stage1_iterations=args.stage1_iterations,
        stage2_iterations=args.stage2_iterations,
        batch_size=args.batch_size,
        lr=args.lr,
        eval_scenes=args.eval_scenes,
    )
    results = ablate(cfg, provenance=_provenance("ablate", vars(args)))
    for r in results:
        tag = f"{r.cell.name:10s} o2m={int(r.cell.use_o2m)} dwcl={int(r.cell.use_dwcl)} fusion={int(r.cell.use_fusion)}"
        if r.error:
            print(f"{tag}  ERROR: {r.error}")
        else:
            print(f"{tag}  mAP {r.mean:.4f} +- {r.std:.4f}  {r.seed_maps}")
    print(f"wrote {os.path.join(cfg.out_dir, 'ablation.csv')}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(scope=args.scope, seed=args.seed)
    print(report.text())
    return 0 if report.passed else 3


def _cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    print(f"config: {ck.config}")
    print(f"with_fusion: {ck.with_fusion}")
    print(f"split: train={list(ck.split.train_combos)}")
    print(f"       heldout={list(ck.split.heldout_combos)}")
    if ck.train_state:
        print(f"train_state: iteration={ck.train_state.get('iteration')}")
    print(f"tensors ({len(ck.tensors)}):")
    for name in ck.tensors:
        print(f"  {name}  shape={tuple(ck.tensors[name].shape)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="tinyovd", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate train and held-out scene datasets")
    g.add_argument("--out-dir", default=out_dir_default(), help="output directory (default: $TINYOVD_OUT or .)")
    g.add_argument("--train-scenes", type=int, default=4000, help="number of training scenes (default 4000)")
    g.add_argument("--eval-scenes", type=int, default=500, help="number of held-out scenes (default 500)")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", default=None, help="JSON config file mirroring TrainConfig (flags win)")
    t.add_argument("--stage", type=int, default=None, choices=(1, 2), help="training stage (default 1)")
    t.add_argument("--iterations", type=int, default=None, help="optimizer steps (default 6000)")
    t.add_argument("--batch-size", type=int, default=None, help="scenes per step (default 8)")
    t.add_argument("--lr", type=float, default=None, help="base learning rate (default 1e-4)")
    t.add_argument("--weight-decay", type=float, default=None, help="decoupled weight decay (default 1e-4)")
    t.add_argument("--lr-drop-fraction", type=float, default=None, help="fraction of schedule before the x0.1 drop (default 0.75)")
    t.add_argument("--num-negative-prompts", type=int, default=None, help="negative prompts per image (default 8)")
    t.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    t.add_argument("--no-o2m", action="store_true", help="disable auxiliary queries")
    t.add_argument("--aux-loss", default=None, choices=("dwcl", "focal"), help="classification loss for auxiliary queries (default dwcl)")
    t.add_argument("--train-data", default=None, help="training dataset path (required)")
    t.add_argument("--init-from", default=None, help="stage-1 checkpoint (required for --stage 2)")
    t.add_argument("--out", default=None, help="output checkpoint path (default $TINYOVD_OUT/model.ckpt)")
    t.add_argument("--metrics-csv", default=None, help="write per-iteration loss CSV here")
    t.add_argument("--resume-from", default=None, help="resume from an interrupted checkpoint")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="evaluation dataset path")
    e.add_argument("--max-scenes", type=int, default=None, help="cap on evaluated scenes (default all)")
    e.add_argument("--out-csv", default=None, help="write a one-row metrics CSV here")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train and score the 4-row component grid")
    a.add_argument("--train-data", required=True, help="training dataset path")
    a.add_argument("--heldout-data", required=True, help="held-out dataset path")
    a.add_argument("--out-dir", default=out_dir_default(), help="directory for checkpoints and ablation.csv")
    a.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    a.add_argument("--stage1-iterations", type=int, default=1500, help="stage-1 steps per cell (default 1500)")
    a.add_argument("--stage2-iterations", type=int, default=500, help="stage-2 steps for the fusion cell (default 500)")
    a.add_argument("--batch-size", type=int, default=8, help="scenes per step (default 8)")
    a.add_argument("--lr", type=float, default=1e-4, help="base learning rate (default 1e-4)")
    a.add_argument("--eval-scenes", type=int, default=None, help="cap on eval scenes per cell (default all)")
    a.set_defaults(func=_cmd_ablate)

    l = sub.add_parser("losscurve", help="emit the loss-comparison CSVs")
    l.add_argument("--out-dir", default=out_dir_default(), help="output directory (default: $TINYOVD_OUT or .)")
    l.add_argument("--beta1", type=float, default=1.0, help="difficulty slope of the focusing factor (default 1)")
    l.add_argument("--beta2", type=float, default=2.0, help="focusing factor offset (default 2)")
    l.add_argument("--iou", type=float, default=0.5, help="fixed difficulty for the 2D curve (default 0.5)")
    l.add_argument("--normalizer", type=float, default=0.25, help="fixed alpha normalizer (default 0.25)")
    l.set_defaults(func=_cmd_losscurve)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    c.add_argument("--scope", default="all", choices=("losses", "fusion", "model", "all"), help="which suite to run (default all)")
    c.add_argument("--seed", type=int, default=0, help="seed for sampled inputs (default 0)")
    c.set_defaults(func=_cmd_gradcheck)

    i = sub.add_parser("inspect", help="print a checkpoint's manifest")
    i.add_argument("--checkpoint", required=True, help="checkpoint path")
    i.set_defaults(func=_cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TinyOvdError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
