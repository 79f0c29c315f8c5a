"""Command-line interface: data generation, training, evaluation, inference, inflation, verification."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, format_config, load_config
from .data import generate_synthetic_dataset, load_dataset, save_dataset, split_indices
from .inflation import InflationPlan, inflate_checkpoint, make_plan, to_2d_checkpoint
from .model import CSG3DCT
from .train import TrainingDiverged, evaluate, infer, model_from_checkpoint, pretrain_2d, train

LABELS = ("mild", "severe")


def _add_gen(sub):
    p = sub.add_parser("gen-data", help="write a synthetic clip dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def cmd_gen_data(args) -> int:
    start = time.perf_counter()
    clips = generate_synthetic_dataset(args.count, T=args.frames, H=args.size, W=args.size, seed=args.seed)
    save_dataset(clips, args.out)
    severe = sum(c.label for c in clips)
    print(f"wrote {len(clips)} clips to {args.out} ({severe} severe, {len(clips) - severe} mild) "
          f"in {time.perf_counter() - start:.1f}s")
    return 0


def _run_meta(run: RunConfig) -> dict:
    return {"split.seed": run.seed, "split.train_fraction": run.train_fraction,
            "split.val_fraction": run.val_fraction}


def cmd_train(args) -> int:
    run = load_config(args.config)
    overrides = {k: getattr(args, k) for k in ("epochs", "lr", "seed", "init") if getattr(args, k) is not None}
    if overrides:
        run = run.replace(**overrides)
    data = load_dataset(args.data)
    log_path = args.log or f"{args.out}.log.jsonl"
    try:
        result = train(run, data, log_path=log_path, diagnostics_dir=Path(args.out).parent)
    except TrainingDiverged as err:
        print(f"training diverged: {err}; diagnostics written next to {args.out}", file=sys.stderr)
        return 2
    ckpt = result.best_checkpoint or save_checkpoint(result.model)
    ckpt.meta.update({k: str(v) for k, v in _run_meta(run).items()})
    ckpt.save(args.out)
    if result.inflation_report is not None and args.report:
        Path(args.report).write_text(result.inflation_report.to_text(), encoding="utf-8")
    test = [data[i] for i in result.splits[2]]
    metrics, loss = evaluate(result.best_model(), test)
    print(f"best epoch {result.best_epoch}; checkpoint {args.out}; log {log_path}")
    print("test " + "  ".join(f"{k}={v:.4f}" for k, v in metrics.as_dict().items()) + f"  loss={loss:.4f}")
    return 0


def cmd_train_2d(args) -> int:
    run = load_config(args.config)
    if args.epochs is not None:
        run = run.replace(pretrain_epochs=args.epochs)
    data = load_dataset(args.data)
    train_idx, _, _ = split_indices(len(data), run.seed, run.train_fraction, run.val_fraction)
    model2d = pretrain_2d(run, [data[i] for i in train_idx])
    to_2d_checkpoint(save_checkpoint(model2d), model2d).save(args.out)
    print(f"wrote 2D checkpoint {args.out} ({model2d.num_parameters()} parameters)")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = model_from_checkpoint(ckpt)
    data = load_dataset(args.data)
    if args.split != "all":
        try:
            seed = int(ckpt.meta["split.seed"])
            fractions = float(ckpt.meta["split.train_fraction"]), float(ckpt.meta["split.val_fraction"])
        except KeyError:
            print("checkpoint carries no split information; use --split all", file=sys.stderr)
            return 2
        idx = split_indices(len(data), seed, *fractions)[("train", "val", "test").index(args.split)]
        data = [data[i] for i in idx]
    metrics, loss = evaluate(model, data)
    record = dict(metrics.as_dict(), loss=loss, clips=len(data))
    if args.json:
        print(json.dumps(record))
    else:
        print(f"{len(data)} clips ({args.split})")
        for k, v in metrics.as_dict().items():
            print(f"  {k:<10} {v:.4f}")
    return 0


def cmd_infer(args) -> int:
    label, probs = infer(args.ckpt, args.clip)
    print(f"{LABELS[label]} ({label})  probs mild={probs[0]:.4f} severe={probs[1]:.4f}")
    return 0


def cmd_make_plan(args) -> int:
    run = load_config(args.config)
    model = CSG3DCT(run.model)
    plan = make_plan(model, seed=args.seed)
    plan.save(args.out)
    inflated = sum(e.kind == "inflate" for e in plan.entries)
    print(f"wrote plan {args.out}: {inflated} conv layers inflated, {len(plan.entries) - inflated} copied")
    return 0


def cmd_inflate(args) -> int:
    src = Checkpoint.load(getattr(args, "from"))
    plan = InflationPlan.load(args.plan)
    ckpt, report = inflate_checkpoint(src, plan)
    ckpt.save(args.out)
    print(f"wrote {args.out}: {len(report.inflated)} inflated, {len(report.copied)} copied, "
          f"{len(report.random_init)} randomly initialised")
    if args.report:
        text = report.to_text()
        if args.report == "-":
            print(text, end="")
        else:
            Path(args.report).write_text(text, encoding="utf-8")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(args.checks or None, full=args.full)
    return 0 if all(r.passed for r in results) else 1


def cmd_show_config(args) -> int:
    run = load_config(args.config) if args.config else RunConfig()
    print(format_config(run), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csg3dct", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen(sub)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSON-lines epoch log (default: <out>.log.jsonl)")
    p.add_argument("--report", help="write the inflation report here (init = inflated)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=("scratch", "inflated"))

    p = sub.add_parser("train-2d", help="pretrain the per-frame 2D model and save a 2D checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a clip directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("infer", help="classify one clip file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)

    p = sub.add_parser("make-plan", help="write the inflation plan for the model in a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inflate", help="inflate a 2D checkpoint into a 3D one")
    p.add_argument("--from", required=True, metavar="CKPT2D")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", nargs="?", const="-", help="print (or write to a file) the inflation report")

    p = sub.add_parser("verify", help="run the invariant/oracle checks and print a pass/fail table")
    p.add_argument("checks", nargs="*")
    p.add_argument("--full", action="store_true", help="include the slow training checks")

    p = sub.add_parser("show-config", help="print a config file with defaults filled in")
    p.add_argument("config", nargs="?")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "train-2d": cmd_train_2d, "eval": cmd_eval,
    "infer": cmd_infer, "make-plan": cmd_make_plan, "inflate": cmd_inflate, "verify": cmd_verify,
    "show-config": cmd_show_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
