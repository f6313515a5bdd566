"""Command-line entry point: ``doad <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .config import ModelConfig, TrainConfig, coerce, read_kv, write_kv
from .data import DataConfig, gen_dataset, label_counts, read_dataset, write_dataset
from .errors import DoadError


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file with TrainConfig/ModelConfig fields")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
    for f in dataclasses.fields(TrainConfig) + dataclasses.fields(ModelConfig):
        if f.name in ("model", "seed"):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None, metavar="V")


def _train_config(args) -> TrainConfig:
    values: dict[str, object] = dict(read_kv(args.config)) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise DoadError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    for k, v in vars(args).items():
        if k.startswith("cfg_") and v is not None:
            values[k[4:]] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    cfg = TrainConfig.from_flat({k: coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def _load_data(path) -> list:
    samples, _ = read_dataset(path)
    return samples


def cmd_gen_data(args) -> None:
    cfg = DataConfig(num_clips=args.num_clips, seed=args.seed, split=args.split,
                     min_actors=args.min_actors, max_actors=args.max_actors)
    samples = gen_dataset(cfg)
    write_dataset(args.out, samples, cfg)
    counts = label_counts(samples)
    print(f"wrote {len(samples)} clips to {args.out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data = _load_data(args.data)
    run_dir = H.make_run_dir(args.runs, cfg.seed)
    write_kv(cfg.to_flat(), run_dir / "config.txt")

    def progress(row):
        if row.step % args.log_every == 0:
            logging.info("step %d lr %.6g loss %.4f (det %.4f, act %.4f)", row.step, row.lr, row.total,
                         row.detection, row.action)

    result = H.train(cfg, data, run_dir, progress)
    if args.eval_data:
        report = H.evaluate(result.model, _load_data(args.eval_data), cfg)
        H.write_report(report, run_dir)
        print(report.summary(), end="")
    print(f"run directory: {run_dir}")


def cmd_eval(args) -> None:
    model, cfg = H.load_checkpoint(args.checkpoint)
    report = H.evaluate(model, _load_data(args.data), cfg, oracle_boxes=args.oracle_boxes)
    out = H.make_run_dir(args.runs, model.seed)
    H.write_report(report, out)
    print(report.summary(), end="")
    print(f"run directory: {out}")


def cmd_ablate(args) -> None:
    cfg = _train_config(args)
    seeds = [cfg.seed + i for i in range(args.num_seeds)]
    run_dir = H.make_run_dir(args.runs, cfg.seed)
    write_kv(cfg.to_flat(), run_dir / "config.txt")
    table = H.run_ablation(args.variants, cfg, seeds, _load_data(args.data), _load_data(args.eval_data), run_dir)
    for v in table.variants():
        m, im = table.values(v), table.values(v, "interaction_map")
        print(f"{v}: mAP {m.mean():.4f} [{m.min():.4f}, {m.max():.4f}]  interaction mAP {im.mean():.4f}")
    print(f"run directory: {run_dir}")


def cmd_gradcheck(args) -> None:
    from .checks import run_gradient_suite
    reports = run_gradient_suite(seed=args.seed)
    worst = 0.0
    for name, rep in reports.items():
        print(f"{name}: max relative error {rep.worst:.3e} {'ok' if rep.passed else 'FAIL'}")
        worst = max(worst, rep.worst)
    if not all(r.passed for r in reports.values()):
        raise DoadError(f"gradient check failed (worst relative error {worst:.3e})")


def cmd_dump_attention(args) -> None:
    model, cfg = H.load_checkpoint(args.checkpoint)
    samples = _load_data(args.data)
    if args.clip is not None:
        samples = [s for s in samples if s.clip_index == args.clip]
        if not samples:
            raise DoadError(f"no clip with index {args.clip}")
    out = H.make_run_dir(args.runs, model.seed)
    dumps = [H.dump_attention(model, s, cfg.infer_confidence, cfg.nms_iou) for s in samples]
    H.write_attention(dumps, out / "attention.csv")
    stats, _ = H.watch_attention_stats(model, samples, conf_threshold=cfg.infer_confidence, nms_iou=cfg.nms_iou)
    empty = sum(d.empty for d in dumps)
    print(f"dumped {len(dumps) - empty} clips ({empty} with fewer than 2 persons)")
    print(f"watch partner argmax frequency: {stats.frequency:.4f} ({stats.hits}/{stats.cases}, "
          f"{stats.skipped} pairs skipped, chance {stats.chance:.4f})")
    print(f"run directory: {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doad", description="Toy spatio-temporal action detector with separate detection and action branches")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic clip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-clips", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--min-actors", type=int, default=2)
    p.add_argument("--max-actors", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both branches jointly")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--runs", default="runs")
    p.add_argument("--log-every", type=int, default=100)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frame-mAP of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--runs", default="runs")
    p.add_argument("--oracle-boxes", action="store_true", help="use gt boxes instead of detections")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare model variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--num-seeds", type=int, default=3)
    p.add_argument("--variants", nargs="+", default=["decoupled", "coupled", "no_transpc", "person_person"],
                   choices=sorted(H.ABLATION_VARIANTS))
    p.add_argument("--runs", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="write final-block TransPC attention maps as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int)
    p.add_argument("--runs", default="runs")
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        args.func(args)
    except (DoadError, OSError, KeyError, ValueError) as e:
        print(f"doad {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
