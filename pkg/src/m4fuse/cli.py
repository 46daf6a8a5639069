"""``m4fuse`` command line.

Machine-readable results go to stdout as JSON lines; human tables go to stderr.
``M4FUSE_THREADS`` caps torch intra-op threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from m4fuse.errors import M4FuseError

log = logging.getLogger("m4fuse")


def _emit(record: dict) -> None:
    print(json.dumps(record, default=str), flush=True)


def _err(text: str) -> None:
    print(text, file=sys.stderr)


def _apply_thread_cap() -> None:
    cap = os.environ.get("M4FUSE_THREADS")
    if cap:
        try:
            n = int(cap)
        except ValueError:
            raise M4FuseError(f"M4FUSE_THREADS must be an integer, got {cap!r}") from None
        if n < 1:
            raise M4FuseError("M4FUSE_THREADS must be at least 1")
        torch.set_num_threads(n)


def save_model(path, model, extra: dict | None = None) -> None:
    from m4fuse.io import write_checkpoint

    config = {"network": model.cfg.to_dict(), **(extra or {})}
    write_checkpoint(path, config, {k: v for k, v in model.state_dict().items()})


def load_model(path):
    from m4fuse.io import read_checkpoint
    from m4fuse.network import NetworkConfig, build

    config, tensors = read_checkpoint(path)
    model = build(NetworkConfig.from_dict(config["network"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model, config


def _print_params(name: str, report: dict) -> None:
    _err(f"{name}: {report['total']:,} parameters")
    for key in ("encoder", "decoder", "else"):
        _err(f"  {key:<8} {report[key]['count']:>10,}  {report[key]['percent']:5.1f}%")


def cmd_gen(args) -> int:
    from m4fuse.config import load_config
    from m4fuse.synthetic import gen_synthetic

    spec = load_config(args.config, args.seed).data
    if args.count is not None:
        spec = dataclasses.replace(spec, count=args.count)
    manifest = gen_synthetic(spec, args.out)
    _emit({"command": "gen", "manifest": str(manifest), "count": spec.count, "seed": spec.seed})
    return 0


def _network_args(args):
    from m4fuse.network import NetworkConfig

    table = json.loads(args.id_table) if args.id_table else {}
    return NetworkConfig(variant=args.variant, num_experts=args.experts, id_table=table, seed=args.seed or 0)


def cmd_build(args) -> int:
    from m4fuse.network import build, param_report

    model = build(_network_args(args))
    record = {"command": "build", "variant": args.variant, "experts": args.experts}
    if args.out:
        save_model(args.out, model)
        record["checkpoint"] = args.out
    if args.report_params:
        report = param_report(model)
        record["params"] = report
        _print_params(f"variant {args.variant}, M={args.experts}", report)
    _emit(record)
    return 0


def cmd_params(args) -> int:
    from m4fuse.network import NetworkConfig, build, param_report

    for variant in args.variants:
        for m in args.experts:
            table = {f"site_{i}": i for i in range(1, m + 1)} if m > 1 else {}
            report = param_report(build(NetworkConfig(variant=variant, num_experts=m, id_table=table)))
            _print_params(f"variant {variant}, M={m}", report)
            _emit({"command": "params", "variant": variant, "experts": m, **report})
    return 0


def cmd_forward(args) -> int:
    from m4fuse.io import read_volume, write_volume

    model, _ = load_model(args.model)
    x = torch.from_numpy(read_volume(args.input))
    ids = args.ids.split(",") if args.ids else None
    with torch.no_grad():
        logits = model(x, ids, training=False)
    write_volume(args.out, logits)
    _emit({"command": "forward", "input_shape": list(x.shape), "output_shape": list(logits.shape),
           "out": args.out})
    return 0


def cmd_train_toy(args) -> int:
    from m4fuse.config import load_config
    from m4fuse.synthetic import generate, load_dataset
    from m4fuse.train import train_toy

    cfg = load_config(args.config, args.seed)
    data = load_dataset(args.data) if args.data else generate(cfg.data)
    model, history = train_toy(cfg, data, args.epochs)
    for entry in history:
        _emit({"command": "train-toy", **entry})
    _err(f"{'epoch':>5} {'loss':>8} {'val dice':>9}")
    for entry in history:
        _err(f"{entry['epoch']:>5} {entry['loss']:>8.4f} {entry['val_dice']:>9.4f}")
    if args.out:
        save_model(args.out, model, {"history": history})
    return 0


def cmd_eval(args) -> int:
    from m4fuse.io import read_volume
    from m4fuse.metrics import region_scores

    pred = read_volume(args.pred)
    gt = read_volume(args.gt)
    if pred.shape != gt.shape:
        raise M4FuseError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    spacing = tuple(float(s) for s in args.spacing.split(",")) if args.spacing else (1.0, 1.0, 1.0)
    for case in range(pred.shape[0]):
        scores = region_scores(np.rint(pred[case, 0]).astype(np.int64),
                               np.rint(gt[case, 0]).astype(np.int64), spacing)
        for region, vals in scores.items():
            _emit({"command": "eval", "case": case, "region": region, **vals})
            hd = "n/a" if vals["hd95"] is None else f"{vals['hd95']:.3f}"
            _err(f"case {case} {region}: dice {vals['dice']:.4f} hd95 {hd}")
    return 0


def cmd_gradcheck(args) -> int:
    from m4fuse.gradcheck import REL_TOL, audit_model

    if args.scale != "tiny":
        raise M4FuseError(f"only the tiny scale is supported, got {args.scale!r}")
    records = audit_model(seed=args.seed or 0)
    for rec in records:
        _emit({"command": "gradcheck", **rec, "pass": rec["rel_error"] < REL_TOL})
    bad = [r["name"] for r in records if r["rel_error"] >= REL_TOL]
    _err(f"{len(records) - len(bad)}/{len(records)} parameter tensors within {REL_TOL:g}")
    return 1 if bad else 0


def cmd_bench(args) -> int:
    from m4fuse.bench import bench_complexity, report_lines

    report = bench_complexity(width=args.width, reps=args.reps, seed=args.seed or 0)
    for line in report_lines(report):
        print(line, flush=True)
    for path in ("scan", "attention"):
        ratios = ", ".join(f"{k}: {v:.2f}" for k, v in report[path]["ratios"].items())
        _err(f"{path:<9} {'pass' if report[path]['pass'] else 'FAIL'}  t(2L)/t(L) {ratios}")
    return 0 if report["scan"]["pass"] and report["attention"]["pass"] else 1


def cmd_accept(args) -> int:
    from m4fuse.acceptance import run_acceptance

    only = [int(k) for k in args.only.split(",")] if args.only else None
    ok, _ = run_acceptance(only)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m4fuse", description="Volumetric tumor segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("build", help="instantiate a network variant")
    p.add_argument("--variant", default="B", choices=["T", "S", "B", "L"])
    p.add_argument("--experts", type=int, default=1)
    p.add_argument("--id-table", help='JSON object, e.g. \'{"site_a": 1, "site_b": 2}\'')
    p.add_argument("--seed", type=int)
    p.add_argument("--report-params", action="store_true")
    p.add_argument("--out", help="write a checkpoint here")
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("params", help="parameter accounting per variant and expert count")
    p.add_argument("--variants", nargs="+", default=["T", "S", "B", "L"])
    p.add_argument("--experts", nargs="+", type=int, default=[1, 2])
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("forward", help="run a checkpoint on one M4FV volume")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", help="comma-separated dataset ids, one per batch item")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("train-toy", help="train on synthetic volumes")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory from `m4fuse gen`")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="write the trained checkpoint here")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="region Dice / HD95 of label volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--spacing", help="voxel spacing d,h,w")
    p.add_argument("--report", default="json-lines", choices=["json-lines"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scale", default="tiny")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="scan vs attention scaling benchmark")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("accept", help="run the acceptance suite")
    p.add_argument("--only", help="comma-separated criterion numbers")
    p.set_defaults(fn=cmd_accept)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except (M4FuseError, OSError) as exc:
        _err(f"m4fuse {args.command}: error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
