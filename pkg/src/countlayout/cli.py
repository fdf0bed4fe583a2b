"""Command-line entry points. See README for worked examples."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np


def _cmd_localize(args):
    from . import tensor_io
    from .localize import localize_bundle

    bundle = tensor_io.read_bundle(args.bundle)
    layout, fg = localize_bundle(bundle, eps_min=args.eps_min, eps_max=args.eps_max)
    tensor_io.save_layout(args.out, layout)
    print(f"instances: {layout.count}  foreground coverage: {fg.coverage:.3f}  "
          f"otsu threshold: {fg.threshold:.4f}")
    print(f"layout written to {args.out}")


def _cmd_viz_pca(args):
    from . import tensor_io
    from .viz import pca_rgb, write_ppm

    bundle = tensor_io.read_bundle(args.bundle)
    proj = pca_rgb(bundle.self_features)
    write_ppm(args.out, proj.image)
    ev = ", ".join(f"{v:.4f}" for v in proj.explained_variance)
    print(f"explained variance: [{ev}]  degenerate: {proj.degenerate}")
    print(f"image written to {args.out}")


def _cmd_relayout(args):
    from . import tensor_io
    from .relayout import CorrectionError, correct_layout
    from .relayout_net import load_checkpoint

    layout = tensor_io.load_layout(args.layout)
    model = load_checkpoint(args.model)
    try:
        corrected = correct_layout(layout, args.target, model)
    except CorrectionError as exc:
        print(f"warning: {exc}; writing best-achieved layout", file=sys.stderr)
        corrected = exc.best_layout
    tensor_io.save_layout(args.out, corrected)
    print(f"count {layout.count} -> {corrected.count} (target {args.target})")
    print(f"layout written to {args.out}")


def _cmd_train(args):
    from .relayout_net import TrainConfig, create_model, save_checkpoint, train
    from .synthdata import generate_dataset, load_dataset

    if args.data:
        pairs = load_dataset(args.data)
    elif args.synth_pairs:
        print(f"generating {args.synth_pairs} verified pairs (seed {args.synth_seed})")
        pairs = generate_dataset(args.synth_pairs, args.synth_seed)
    else:
        raise SystemExit("provide --data DIR or --synth-pairs N")
    model = create_model(seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        seed=args.seed,
        augment_hflip=not args.no_hflip,
        augment_channel_shuffle=not args.no_shuffle,
        checkpoint_every=args.checkpoint_every,
    )
    train(model, pairs, cfg, checkpoint_dir=args.out if args.checkpoint_every else None)
    save_checkpoint(args.out, model)
    print(f"trained {args.epochs} epochs over {len(pairs)} pairs; "
          f"final loss {model.loss_history[-1]:.5f}")
    print(f"checkpoint written to {args.out}")


def _cmd_gen_data(args):
    from .synthdata import build_dataset

    build_dataset(args.pairs, args.seed, args.out)
    print(f"{args.pairs} verified pairs written to {args.out}")


def _cmd_guide_sim(args):
    from . import tensor_io
    from .guidance import GuidanceConfig, export_guidance, guide_surrogate

    layout = tensor_io.load_layout(args.layout)
    cfg = GuidanceConfig(opt_steps=args.steps, step_size=args.step_size,
                         fg_weight=args.fg_weight)
    result = guide_surrogate(layout, cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    tensor_io.write_blob(os.path.join(args.out, "cross_map.cgtn"),
                         result.cross_map.astype(np.float32))
    tensor_io.write_blob(os.path.join(args.out, "sa_map.cgtn"),
                         result.sa_map.scores.astype(np.float32))
    with open(os.path.join(args.out, "loss_trace.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{v:.8f}\n" for v in result.loss_trace)
    if args.export_guidance:
        export_guidance(os.path.join(args.out, "guidance"), layout, cfg)
    print(f"final IoU vs layout union: {result.iou:.4f} "
          f"({len(result.loss_trace) - 1} steps)")
    print(f"artifacts written to {args.out}")


def _cmd_eval(args):
    from . import tensor_io
    from .evaluation import boxes_from_layout, count_accuracy, mask_metrics

    with open(args.targets, "r", encoding="utf-8") as fh:
        targets = [int(line.split()[0]) for line in fh if line.strip()]
    dirs = sorted(
        d for d in os.listdir(args.layouts)
        if os.path.isdir(os.path.join(args.layouts, d))
    )
    if len(dirs) != len(targets):
        raise SystemExit(f"{len(dirs)} layout dirs vs {len(targets)} targets")
    layouts = [tensor_io.load_layout(os.path.join(args.layouts, d)) for d in dirs]
    report = count_accuracy(list(zip(targets, layouts)))
    lines = [f"count accuracy: {report.accuracy:.4f} over {len(targets)} layouts", ""]
    lines.append("confusion (rows: target 1..10, cols: detected 1..10):")
    for row in report.confusion:
        lines.append(" ".join(f"{v:3d}" for v in row))
    lines.append("")
    for d, (target, layout) in zip(dirs, zip(targets, layouts)):
        mm = mask_metrics(boxes_from_layout(layout), layout.union())
        lines.append(
            f"{d}: target={target} detected={count_instances_of(layout)} "
            f"precision={mm.precision:.3f} recall={mm.recall:.3f} iou={mm.iou:.3f}"
        )
    text = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text)
    print(f"report written to {args.out}")


def count_instances_of(layout):
    from .localize import count_instances

    return count_instances(layout)


def _cmd_prompts(args):
    from .evaluation import cococount_prompts

    prompts = cococount_prompts(seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.writelines(p + "\n" for p in prompts)
    print(f"{len(prompts)} prompts written to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="countlayout",
                                description="layout counting and correction engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("localize", help="bundle -> instance layout")
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--eps-min", type=float, default=0.1)
    q.add_argument("--eps-max", type=float, default=0.2)
    q.set_defaults(func=_cmd_localize)

    q = sub.add_parser("viz-pca", help="bundle features -> PPM image")
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_viz_pca)

    q = sub.add_parser("relayout", help="correct a layout to a target count")
    q.add_argument("--layout", required=True)
    q.add_argument("--target", type=int, required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_relayout)

    q = sub.add_parser("train", help="train the k->k+1 network")
    q.add_argument("--data", help="dataset directory from gen-data")
    q.add_argument("--synth-pairs", type=int, help="generate this many pairs in memory")
    q.add_argument("--synth-seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--epochs", type=int, default=30)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--no-hflip", action="store_true")
    q.add_argument("--no-shuffle", action="store_true")
    q.add_argument("--checkpoint-every", type=int, default=0)
    q.set_defaults(func=_cmd_train)

    q = sub.add_parser("gen-data", help="write a verified (k, k+1) pair dataset")
    q.add_argument("--pairs", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_gen_data)

    q = sub.add_parser("guide-sim", help="surrogate layout-guided optimization")
    q.add_argument("--layout", required=True)
    q.add_argument("--steps", type=int, default=500)
    q.add_argument("--step-size", type=float, default=0.5)
    q.add_argument("--fg-weight", type=float, default=10.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--export-guidance", action="store_true")
    q.set_defaults(func=_cmd_guide_sim)

    q = sub.add_parser("eval", help="count accuracy + mask metrics report")
    q.add_argument("--layouts", required=True, help="directory of layout subdirectories")
    q.add_argument("--targets", required=True, help="text file, one target count per line")
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_eval)

    q = sub.add_parser("prompts", help="emit the 200-prompt counting benchmark")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_prompts)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
