"""Command-line entry point: ``ecn {plan,audit,train,eval,gradcheck,visualize}``.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .cascade import ECN, CascadeConfig, audit_params, parse_scale, plan_network
from .checkpoint import CheckpointError, load_checkpoint
from .data import DatasetError, DatasetSpec, load_dataset, normalize
from .tensor import Tensor

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("ecn")


class UsageError(Exception):
    pass


def _scale(text: str):
    try:
        return parse_scale(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_network_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--block", type=int, choices=range(1, 7), required=required)
    p.add_argument("--init-channels", type=int, required=required)
    p.add_argument("--scale", type=_scale, required=required, help="rational in (0,1), e.g. 3/4")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--input", type=int, default=32, help="input height and width")
    p.add_argument("--growth", type=int, default=None)
    p.add_argument("--threshold", type=int, default=4)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--recurrence", choices=("accumulated", "previous"), default="accumulated")
    p.add_argument("--align-corners", action="store_true")


def _config(args, classes: int) -> CascadeConfig:
    return CascadeConfig(init_channels=args.init_channels, scale=args.scale, block=args.block,
                         iterations=args.iterations, class_count=classes, input_hw=(args.input, args.input),
                         growth=args.growth, stop_threshold_px=args.threshold, dropout_rate=args.dropout,
                         recurrence=args.recurrence, align_corners=args.align_corners)


def _threads(n: Optional[int]):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _write_manifest(outdir: str, manifest: dict) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------


def cmd_plan(args) -> int:
    try:
        plan = plan_network(_config(args, args.classes or 10))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(plan.table())
    if args.audit:
        report = audit_params(plan, ECN(plan))
        print(f"audit: {'pass' if report.ok else 'FAIL ' + report.first_mismatch}")
        if not report.ok:
            return EXIT_FAIL
    if args.out:
        _write_manifest(args.out, {"tool": "ecn", "version": __version__, "command": "plan",
                                   "plan": plan.to_manifest()})
    return EXIT_OK


def cmd_audit(args) -> int:
    from .reference_counts import oracle_cells

    failures = 0
    total = 0
    for table, classes, block, init, scale, expected in oracle_cells(args.table):
        cfg = CascadeConfig(init_channels=init, scale=scale, block=block, class_count=classes)
        plan = plan_network(cfg)
        report = audit_params(plan, ECN(plan, dtype=np.float32), expected_total=expected)
        total += 1
        status = "pass" if report.ok else f"FAIL ({report.first_mismatch})"
        failures += not report.ok
        print(f"{table:<8} classes={classes:<3} block={block} init={init:<3} scale={scale:<3} "
              f"expected={expected:>9} got={plan.total_params:>9} {status}")
    print(f"{total - failures}/{total} cells match")
    return EXIT_OK if failures == 0 else EXIT_FAIL


def _dataset_spec(args, split: str) -> DatasetSpec:
    return DatasetSpec(args.dataset, root=args.data_root, split=split, samples=args.samples,
                       classes=args.synthetic_classes, seed=args.data_seed)


def cmd_train(args) -> int:
    from .train import TrainConfig, TrainingDiverged, load_state, train

    if args.manifest:
        with open(args.manifest) as fh:
            m = json.load(fh)
        cfg = CascadeConfig.from_dict(m["cascade"])
        tcfg = TrainConfig(**m["train"])
        train_spec = DatasetSpec(**m["dataset"])
        threads = m.get("threads", 1)
    else:
        for flag in ("block", "init_channels", "scale"):
            if getattr(args, flag) is None:
                raise UsageError(f"--{flag.replace('_', '-')} is required without --manifest")
        train_spec = _dataset_spec(args, "train")
        cfg = _config(args, train_spec.class_count)
        tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr, schedule=args.schedule,
                           momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
                           eval_every=args.eval_every, prefetch=args.prefetch)
        threads = args.threads
    test_spec = DatasetSpec(**{**train_spec.to_dict(), "split": "test"})
    manifest = {"tool": "ecn", "version": __version__, "command": "train", "cascade": cfg.to_dict(),
                "train": tcfg.to_dict(), "dataset": train_spec.to_dict(), "seed": tcfg.seed, "threads": threads}
    with _threads(threads):
        train_set = load_dataset(train_spec)
        test_set = None if args.no_eval else load_dataset(test_spec)
        plan = plan_network(cfg)
        _write_manifest(args.out, manifest)
        state = None
        if args.resume:
            state = load_state(args.resume)
            net = state.net
        else:
            net = ECN(plan, seed=tcfg.seed)
        manifest["plan"] = plan.to_manifest()
        try:
            state = train(net, train_set, tcfg, test_set, outdir=args.out, manifest=manifest, state=state,
                          stop_after=args.stop_after,
                          on_epoch=lambda r: print(",".join(r.row()), flush=True))
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
    last = state.metrics[-1] if state.metrics else None
    if last:
        print(f"final train_acc={last.train_acc:.4f}"
              + ("" if last.test_acc is None else f" test_acc={last.test_acc:.4f}"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, restore

    ckpt = load_checkpoint(args.checkpoint)
    state = restore(ckpt)
    if args.dataset is None:
        spec = DatasetSpec(**{**ckpt.manifest["dataset"], "split": args.split})
    else:
        spec = _dataset_spec(args, args.split)
    ds = load_dataset(spec)
    if ds.class_count != state.net.plan.config.class_count:
        print(f"error: dataset has {ds.class_count} classes, checkpoint {state.net.plan.config.class_count}",
              file=sys.stderr)
        return EXIT_FAIL
    with _threads(args.threads):
        loss, acc = evaluate(state.net, ds, state.mean, state.std, args.batch)
    print(f"loss={loss!r} acc={acc!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import CASES, TOLERANCE, run_case

    names = args.case or list(CASES)
    worst_all = 0.0
    failed = []
    for name in names:
        if name not in CASES:
            raise UsageError(f"unknown case {name!r}; choose from {', '.join(CASES)}")
        worst = max(run_case(name, seed) for seed in range(args.seeds))
        ok = worst <= TOLERANCE
        if not ok:
            failed.append(name)
        worst_all = max(worst_all, worst)
        print(f"{name:<24} max_rel_err={worst:.3e} {'pass' if ok else 'FAIL'}")
    print(f"worst={worst_all:.3e} tolerance={TOLERANCE:g} failed={len(failed)}")
    return EXIT_OK if not failed else EXIT_FAIL


def _load_image(args, ckpt) -> np.ndarray:
    if args.image_file:
        raw = open(args.image_file, "rb").read()
        hw = tuple(ckpt.manifest["plan"]["config"]["input_hw"])
        if len(raw) != 3 * hw[0] * hw[1]:
            raise DatasetError(f"{args.image_file}: expected {3 * hw[0] * hw[1]} bytes of channel-planar pixels")
        return np.frombuffer(raw, dtype=np.uint8).reshape(1, 3, *hw)
    spec = DatasetSpec(**{**ckpt.manifest["dataset"], "split": args.split}) if args.dataset is None \
        else _dataset_spec(args, args.split)
    ds = load_dataset(spec)
    return ds.images[args.index:args.index + 1]


def cmd_visualize(args) -> int:
    from .train import restore
    from .visualize import export_feature_maps

    ckpt = load_checkpoint(args.checkpoint)
    state = restore(ckpt)
    image = _load_image(args, ckpt)
    x = Tensor(normalize(image, state.mean, state.std))
    states = state.net.features(x, train=False)
    paths = export_feature_maps(states, args.out)
    _write_manifest(args.out, {"tool": "ecn", "version": __version__, "command": "visualize",
                               "checkpoint": os.path.abspath(args.checkpoint), "plan": ckpt.manifest["plan"]})
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecn", description="Evenly cascaded convolutional networks")
    parser.add_argument("--version", action="version", version=f"ecn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print the layer schedule and parameter counts")
    _add_network_flags(p)
    p.add_argument("--audit", action="store_true", help="also instantiate and count parameters")
    p.add_argument("--out", help="directory for manifest.json")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("audit", help="check parameter counts against the published tables")
    p.add_argument("--table", choices=("all", "sweep10", "sweep100", "ecn6"), default="all")
    p.set_defaults(func=cmd_audit)

    def data_flags(q, default_dataset):
        q.add_argument("--dataset", choices=("synthetic", "cifar10", "cifar100", "imagenet32"),
                       default=default_dataset)
        q.add_argument("--data-root")
        q.add_argument("--samples", type=int, default=256, help="synthetic dataset size")
        q.add_argument("--synthetic-classes", type=int, default=4)
        q.add_argument("--data-seed", type=int, default=0)
        q.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="train a network")
    _add_network_flags(p, required=False)
    data_flags(p, "synthetic")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--schedule", choices=("cosine", "three-stage"), default="cosine")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--prefetch", type=int, default=0)
    p.add_argument("--no-eval", action="store_true")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (the schedule still spans --epochs)")
    p.add_argument("--manifest", help="rerun from a manifest.json written by a previous run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    data_flags(p, None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--batch", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every operator")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--case", action="append")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="export per-layer feature-map grids")
    p.add_argument("--checkpoint", required=True)
    data_flags(p, None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--image-file", help="raw channel-planar uint8 image instead of a dataset index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DatasetError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
