"""Command-line entry point (``corealloc``)."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .harness import (ExperimentConfig, RunMetrics, evaluate_autoscale, evaluate_checkpoint, export_metrics,
                      export_summary, load_config, train, transfer)
from .harness.train import CHECKPOINT
from .neuralnet import load_checkpoint
from .obsfeat import feature_schema


def _users(text: str) -> list[int]:
    return [int(u) for u in text.split(",") if u.strip()]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _print_summary(metrics: RunMetrics) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    rows = metrics.summary()
    if rows:
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([f"{v:.4g}" if isinstance(v, float) else v for v in row.values()])


def _write_eval(metrics: RunMetrics, args) -> None:
    if args.out:
        export_metrics(metrics, args.out)
    if args.summary:
        export_summary(metrics, args.summary)
    _print_summary(metrics)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or f"runs/seed{cfg.seed}")
    res = train(cfg, out, resume=not args.fresh, realtime=args.realtime)
    print(f"checkpoint: {res.checkpoint}")
    _print_summary(res.metrics)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    metrics = evaluate_checkpoint(args.checkpoint, cfg, _users(args.users) if args.users else None, args.duration)
    _write_eval(metrics, args)
    return 0


def cmd_autoscale_eval(args) -> int:
    cfg = _config(args)
    metrics = evaluate_autoscale(cfg, _users(args.users) if args.users else None, args.duration)
    _write_eval(metrics, args)
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    res = transfer(args.source, cfg, Path(args.out or f"runs/transfer-seed{cfg.seed}"),
                   stop_on_parity=args.stop_on_parity)
    print(f"steps to parity: transfer={res.transfer.steps_to_parity} scratch={res.scratch.steps_to_parity} "
          f"ratio={res.ratio:.3f} (budget {res.schedule.rl_steps})")
    return 0


def cmd_features(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["index", "category", "name"])
    w.writerows(feature_schema(args.m_max))
    return 0


def cmd_export(args) -> int:
    path = Path(args.source)
    if path.is_dir():
        path = path / CHECKPOINT
    arrays, meta = load_checkpoint(path)
    if "run" not in meta:
        print(f"{path} holds no run metrics", file=sys.stderr)
        return 2
    metrics = RunMetrics.from_arrays(arrays, meta["run"]["m"])
    (export_summary if args.summary else export_metrics)(metrics, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corealloc", description="Learned per-microservice core allocation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent (resumes from OUT when a checkpoint exists)")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--realtime", action="store_true", help="pace steps to wall-clock time")
    t.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    t.set_defaults(func=cmd_train)

    for name, func, needs_ckpt in (("eval", cmd_eval, True), ("autoscale-eval", cmd_autoscale_eval, False)):
        e = sub.add_parser(name, help=f"{'checkpoint' if needs_ckpt else 'autoscaler'} evaluation sweep")
        if needs_ckpt:
            e.add_argument("--checkpoint", required=True)
        e.add_argument("--config")
        e.add_argument("--seed", type=int)
        e.add_argument("--users", help="comma-separated user counts")
        e.add_argument("--duration", type=int)
        e.add_argument("--out", help="per-step CSV")
        e.add_argument("--summary", help="per-user-count CSV")
        e.set_defaults(func=func)

    x = sub.add_parser("transfer", help="fine-tune a checkpoint on another topology vs. scratch")
    x.add_argument("--from", dest="source", required=True)
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.add_argument("--stop-on-parity", action="store_true")
    x.set_defaults(func=cmd_transfer)

    f = sub.add_parser("features", help="print the feature-row layout")
    f.add_argument("--schema", action="store_true", required=True)
    f.add_argument("--m-max", type=int, default=12)
    f.set_defaults(func=cmd_features)

    o = sub.add_parser("export", help="write a run's per-step metrics as CSV")
    o.add_argument("--from", dest="source", required=True, help="run directory or checkpoint file")
    o.add_argument("--out", required=True)
    o.add_argument("--summary", action="store_true", help="write per-user-count aggregates instead")
    o.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
