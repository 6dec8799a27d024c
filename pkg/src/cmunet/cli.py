"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import os
import sys


def _cap_threads():
    n = os.environ.get("CMUNET_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()  # must precede the numpy import chain

import argparse
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, EngineError
from . import bench as bench_mod
from . import checks as checks_mod
from . import data as data_mod
from . import train as train_mod
from .metrics import compute_metrics
from .model import ModelConfig, build_model, count_parameters


def _build_parser():
    p = argparse.ArgumentParser(
        prog="cmunet",
        description="CNN-Mamba segmentation engine: data generation, training, "
                    "evaluation, verification and scan benchmarking.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--num", type=int, required=True, help="number of image/mask pairs")
    g.add_argument("--size", type=int, default=64, help="square image size (default 64)")
    g.add_argument("--classes", type=int, default=4, help="class count incl. background (2..8)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    t = sub.add_parser("train", help="train a model from a run-config json")
    t.add_argument("--config", required=True, help="run config json "
                   "(sections: model, train, data, ablation; unknown keys rejected)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint output path")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--report", required=True, help="metric report json output")
    e.add_argument("--tta", action="store_true", help="average flips at test time")

    b = sub.add_parser("bench-scan", help="scan kernel timing and growth ratios")
    b.add_argument("--lengths", default="4096,8192,16384,32768",
                   help="comma-separated ascending sequence lengths")
    b.add_argument("--channels", type=int, default=16, help="scan channels (default 16)")
    b.add_argument("--state", type=int, default=8, help="state size (default 8)")
    b.add_argument("--report", required=True, help="benchmark report json output")

    c = sub.add_parser("check", help="run verification suites")
    c.add_argument("--suite", choices=["grads", "scan", "metrics", "all"], default="all")

    i = sub.add_parser("info", help="describe a checkpoint")
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    return p


def cmd_generate(args, parser):
    if not 2 <= args.classes <= 8:
        parser.error("--classes must be between 2 and 8")
    if args.num < 1:
        parser.error("--num must be positive")
    if args.size % 32:
        parser.error("--size must be divisible by 32")
    ds = data_mod.synth_generate(args.out, args.num, args.size, args.classes, args.seed)
    print(f"wrote {args.num} samples ({args.size}x{args.size}, {args.classes} classes) "
          f"to {ds.root}")
    return 0


def cmd_train(args, parser):
    run_cfg = train_mod.load_run_config(args.config)  # ConfigError -> exit 2
    if not Path(args.data, "meta.json").exists():
        print(f"error: {args.data} is not a dataset directory", file=sys.stderr)
        return 1

    def log(entry):
        print(f"epoch {entry['epoch']:3d}  train_loss {entry['train_loss']:.4f}  "
              f"val_mIoU {entry['val_mIoU']:.4f}")

    result = train_mod.train_model(run_cfg, args.data, args.out, log_fn=log)
    print(f"checkpoint: {result.checkpoint_path}  best val mIoU: {max(result.best_miou, 0):.4f}")
    return 0


def cmd_eval(args, parser):
    model, ck = train_mod.model_from_checkpoint(args.ckpt)
    ds = data_mod.open_dataset(args.data)
    if ds.num_classes != model.config.num_classes:
        print(f"error: checkpoint has {model.config.num_classes} classes, "
              f"dataset has {ds.num_classes}", file=sys.stderr)
        return 1
    ids = ds.ids("val") or ds.ids("all")
    report, cm = train_mod.evaluate(model, ds, ids, model.config.metric_classes(),
                                    tta=args.tta)
    doc = report.to_dict()
    doc["confusion_matrix"] = cm.counts.tolist()
    doc["num_samples"] = len(ids)
    doc["included_classes"] = list(model.config.metric_classes())
    doc["tta"] = bool(args.tta)
    Path(args.report).write_text(json.dumps(doc, indent=1, sort_keys=True))

    names = ds.class_names if len(ds.class_names) == ds.num_classes else \
        [f"class_{c}" for c in range(ds.num_classes)]
    width = max(len(n) for n in names)
    print(f"{'class':<{width}}  {'F1':>7}  {'IoU':>7}  {'Prec':>7}  {'Rec':>7}")
    for c in range(ds.num_classes):
        row = report.per_class[c]
        print(f"{names[c]:<{width}}  {row['f1']:7.4f}  {row['iou']:7.4f}  "
              f"{row['precision']:7.4f}  {row['recall']:7.4f}")
    print(f"mF1 {report.mF1:.4f}  mIoU {report.mIoU:.4f}  OA {report.OA:.4f}")
    return 0


def cmd_bench_scan(args, parser):
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v]
    except ValueError:
        parser.error("--lengths must be comma-separated integers")
    if not lengths:
        parser.error("--lengths is empty")
    if lengths != sorted(lengths):
        parser.error("--lengths must be ascending")
    report = bench_mod.bench_scan(lengths, channels=args.channels, state=args.state)
    Path(args.report).write_text(json.dumps(report, indent=1, sort_keys=True))
    for impl in ("parallel", "sequential"):
        for L in lengths:
            row = report["results"][impl][str(L)]
            print(f"{impl:>10} L={L:<6} {row['mean_ms']:9.2f} ms "
                  f"(±{row['std_ms']:.2f}, median {row['median_ms']:.2f}, n={row['reps']})")
    ratios = report["ratios"]["parallel"]
    if ratios:
        pretty = "  ".join(f"{k}: {v:.2f}" for k, v in ratios.items())
        print(f"parallel growth ratios  {pretty}")
    return 0


def cmd_check(args, parser):
    results = checks_mod.run_suites(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_info(args, parser):
    from .checkpoint import load_checkpoint
    ck = load_checkpoint(args.ckpt)
    cfg = ModelConfig.from_dict(ck.config)
    model = build_model(cfg, seed=ck.seed)
    total = count_parameters(model)
    print(f"checkpoint: {args.ckpt}")
    print(f"epoch: {ck.epoch}  seed: {ck.seed}")
    print(f"encoder channels: {list(cfg.encoder_channels)}  classes: {cfg.num_classes}")
    print(f"state size: {cfg.state_size}  expansion: {cfg.expansion}  "
          f"msaa: {cfg.use_msaa}  multi_output: {cfg.multi_output}")
    print(f"parameters: {total} ({total / 1e6:.2f} M)")
    for name, n in model.parameter_breakdown().items():
        print(f"  {name:<8} {n:>10}  ({n / 1e6:.3f} M)")
    return 0


_COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
             "bench-scan": cmd_bench_scan, "check": cmd_check, "info": cmd_info}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, parser)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (EngineError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
