"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 config error,
3 checkpoint error, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_cifar10, synthetic_dataset
from .errors import ConfigError, DataError, PitError
from .gradcheck import SUITES, run_suite
from .io import atomic_write, load_tensor
from .models import PRESETS, ArchConfig, build, forward, preset, toy_config, with_classes
from .training import TrainConfig, sweep, sweep_csv, train

log = logging.getLogger("pit")


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _default_seed() -> int:
    return int(os.environ.get("PIT_SEED", "0"))


def _resolve_config(args) -> ArchConfig:
    if getattr(args, "config", None):
        return ArchConfig.load(args.config)
    return preset(args.preset)


# ---------------------------------------------------------------------------


def cmd_presets(args) -> int:
    print(f"{'preset':8} {'stage':>5} {'spatial':>8} {'blocks':>6} {'heads':>5} {'channels':>8} "
          f"{'params':>9} {'MACs':>8}")
    for name, cfg in PRESETS.items():
        rep = A.count_flops(cfg)
        for i, (st, hw) in enumerate(zip(cfg.stages, cfg.spatial_sizes())):
            tail = f"{rep.total_params / 1e6:8.1f}M {rep.total_macs / 1e9:7.2f}B" if i == 0 else ""
            print(f"{name if i == 0 else '':8} {i + 1:>5} {f'{hw[0]}x{hw[1]}':>8} {st.num_blocks:>6} "
                  f"{st.num_heads:>5} {st.channels:>8} {tail}")
    return 0


def cmd_flops(args) -> int:
    cfg = _resolve_config(args)
    rep = A.count_flops(cfg, args.image_size)
    width = max(len(e.name) for e in rep.entries)
    for e in rep.entries:
        print(f"{e.name:{width}} {e.macs:>15,d} {e.params:>12,d}")
    print(f"{'total':{width}} {rep.total_macs:>15,d} {rep.total_params:>12,d}")
    print(f"total: {rep.total_macs / 1e9:.2f}B MACs, {rep.total_params / 1e6:.2f}M params "
          f"at {rep.image_size}x{rep.image_size}")
    if args.out:
        A.emit_flops_csv(rep, args.out)
    return 0


def cmd_attention(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    elif args.preset:
        model = build(preset(args.preset), args.seed)
    else:
        raise ConfigError("attention needs --checkpoint DIR or --preset NAME")
    cfg = model.config
    if args.images:
        images = load_tensor(args.images)
    else:
        n = args.synthetic
        images = synthetic_dataset(args.seed, n, min(10, n), cfg.image_size).images
    thresholds = args.thresholds
    per_threshold = {t: [] for t in thresholds}
    for i in range(0, len(images), args.batch_size):
        _, records = forward(model, images[i:i + args.batch_size], capture_attention=True)
        for t in thresholds:
            per_threshold[t].append(A.interaction_ratio(records, t))
    reports = [A.merge_reports(per_threshold[t]) for t in thresholds]
    A.emit_interaction_csv(reports, args.out)
    out = Path(args.out)
    atomic_write(out.with_name(out.stem + "_resnet.csv"), A.resnet_csv(cfg.spatial_sizes()).encode())
    for rep in reports:
        for e in rep.entries:
            print(f"stage {e.stage} block {e.block:2d} thr {e.threshold:g}: {e.ratio:.4f}")
    return 0


def _datasets(args, image_size: int):
    if args.data:
        train_ds, test_ds = load_cifar10(args.data)
        if args.n_train:
            train_ds = train_ds.subset(args.n_train)
        if args.n_test:
            test_ds = test_ds.subset(args.n_test)
        return train_ds, test_ds
    if not args.synthetic:
        raise DataError("choose --data DIR or --synthetic")
    return (synthetic_dataset(args.seed, args.n_train or 512, 10, image_size, "train"),
            synthetic_dataset(args.seed + 1, args.n_test or 128, 10, image_size, "test"))


def _train_config(args) -> TrainConfig:
    warm = args.warmup_epochs if args.warmup_epochs is not None else min(5, args.epochs - 1)
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
                       weight_decay=args.weight_decay, warmup_epochs=warm, seed=args.seed,
                       min_lr=args.min_lr, record_time=args.timing)


def cmd_train(args) -> int:
    cfg_train = _train_config(args)
    if args.preset:
        image_size = preset(args.preset).image_size
    else:
        image_size = args.image_size
    train_ds, test_ds = _datasets(args, image_size)
    if args.preset:
        config = with_classes(preset(args.preset), train_ds.num_classes)
    else:
        config = toy_config(args.width_scale, args.depth_scale, image_size, args.toy, train_ds.num_classes)
    model = build(config, args.seed)
    mlog = train(model, train_ds, test_ds, cfg_train, args.out)
    last = mlog.rows[-1]
    print(f"epoch {last.epoch} train_loss {last.train_loss:.4f} train_acc {last.train_acc:.4f} "
          f"val_acc {last.val_acc:.4f} lr {last.lr:.3e}")
    return 0


def cmd_sweep(args) -> int:
    cfg_train = _train_config(args)
    train_ds, test_ds = _datasets(args, args.image_size)
    out = Path(args.out)
    rows = sweep(args.scales, train_ds, test_ds, cfg_train, depth_scale=args.depth_scale,
                 out_path=out / "sweep.csv")
    print(sweep_csv(rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    scopes = list(SUITES) if args.scope == "all" else [args.scope]
    seeds = range(args.seeds)
    worst_name, worst = None, None
    for scope in scopes:
        for name, chk in run_suite(scope, seeds).items():
            status = "ok" if chk.ok else "FAIL"
            print(f"{scope:6} {name:28} {chk.kind} {chk.error:.3e} (< {chk.limit:g}) {status}")
            if worst is None or chk.error / chk.limit > worst.error / worst.limit:
                worst_name, worst = name, chk
    if worst is not None and not worst.ok:
        print(f"gradient check failed; worst offender {worst_name}: {worst.error:.3e}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------


def _add_training_flags(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="CIFAR-10 binary directory")
    src.add_argument("--synthetic", action="store_true", help="use the synthetic blob dataset")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--depth-scale", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=None, help="base lr (default 5e-4 * batch / 512)")
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--min-lr", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--timing", action="store_true", help="record wallclock seconds in the metrics log")
    p.add_argument("--out", default="runs/latest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("presets", help="print preset stage tables")

    p = sub.add_parser("flops", help="analytic MAC/parameter accounting")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset")
    g.add_argument("--config")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--out")

    p = sub.add_parser("attention", help="spatial interaction ratios of captured attention")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", help="random-weight model instead of a checkpoint")
    p.add_argument("--images", help="tensor container [N,3,H,W]")
    p.add_argument("--synthetic", type=int, default=4, help="number of synthetic images")
    p.add_argument("--thresholds", type=_floats, default=[0.01, 0.10])
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    m = p.add_mutually_exclusive_group(required=True)
    m.add_argument("--preset")
    m.add_argument("--toy", choices=("pit", "vit"))
    p.add_argument("--width-scale", type=float, default=1.0)
    _add_training_flags(p)

    p = sub.add_parser("sweep", help="train matched toy ViT/PiT pairs over widths")
    p.add_argument("--scales", type=_floats, default=[0.5, 1.0])
    _add_training_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=(*SUITES, "all"), default="all")
    p.add_argument("--seeds", type=int, default=1)
    return parser


COMMANDS = {"presets": cmd_presets, "flops": cmd_flops, "attention": cmd_attention,
            "train": cmd_train, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", "unset") is None:
        args.seed = _default_seed()
    try:
        return COMMANDS[args.command](args)
    except PitError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
