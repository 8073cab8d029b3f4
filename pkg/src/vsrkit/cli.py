"""Command-line interface.

Every setting lives in one key-value config file (see vsrkit.config);
any key can be overridden on the command line with ``--set key=value``.
Exit code 0 only on full success.
"""

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import harness
from .config import load_config
from .errors import ConfigError


def _add_config_args(p):
    p.add_argument("--config", default=None, help="key-value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")


def _cfg(args, **forced):
    cfg = load_config(args.config, args.overrides)
    if forced:
        from dataclasses import replace
        cfg = replace(cfg, **forced)
    return cfg.validate()


def cmd_corpus(args):
    cfg = load_config(args.config, args.overrides)
    rows = corpus_mod.generate_corpus(args.out or cfg.data_dir,
                                      num_clips=args.clips, seed=args.seed)
    print(f"wrote {len(rows)} clips to {args.out or cfg.data_dir}")


def cmd_units(args):
    cfg = load_config(args.config, args.overrides)
    path = harness.build_units(args.data or cfg.data_dir,
                               codebook_size=cfg.codebook_size,
                               seed=args.seed)
    print(f"unit cache written: {path}")


def cmd_train_stage1(args):
    ckpt = harness.train_stage1(_cfg(args, stage=1))
    print(f"stage-1 checkpoint: {ckpt}")


def cmd_train_stage2(args):
    ckpt = harness.train_stage2(_cfg(args, stage=2))
    print(f"stage-2 checkpoint: {ckpt}")


def cmd_eval(args):
    cfg = _cfg(args, stage=2)
    report = harness.evaluate(cfg, args.checkpoint)
    print(harness.format_condition_table(report), end="")
    if args.heatmaps:
        ids = [r["clip_id"] for r in report.clips[:args.heatmaps]]
        harness.export_heatmaps(cfg, args.checkpoint, ids,
                                Path(cfg.out_dir) / "heatmaps")
        print(f"heatmaps for {len(ids)} clips in {cfg.out_dir}/heatmaps")


def cmd_report(args):
    for path in args.reports:
        data = json.loads(Path(path).read_text())
        report = harness.EvalReport(
            overall_wer=data["overall_wer"], num_clips=data["num_clips"],
            factors=data["factors"], clips=[])
        print(f"== {path}")
        print(harness.format_condition_table(report), end="")


def cmd_heatmaps(args):
    cfg = _cfg(args, stage=2)
    written = harness.export_heatmaps(cfg, args.checkpoint, args.clip_ids,
                                      args.out, plot=args.plot)
    print(f"wrote {len(written)} heatmap tensors to {args.out}")


def cmd_ablate(args):
    cfg = load_config(args.config, args.overrides)
    results = harness.ablate(cfg, stage1_steps=args.stage1_steps)
    print(f"{'stage1':<14}{'stage2':<14}{'fusion':<8}WER")
    for r in results:
        print(f"{r['stage1']:<14}{r['stage2']:<14}{r['fusion']:<8}"
              f"{r['wer']:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vsrkit",
        description="dual-path visual speech recognition, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate the synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="dataset directory")
    p.add_argument("--clips", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_corpus)

    p = sub.add_parser("units", help="build codebook + unit cache")
    _add_config_args(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_units)

    p = sub.add_parser("train-stage1", help="train the alignment stage")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the recognition stage")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("eval", help="decode a split and write reports")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--heatmaps", type=int, default=0, metavar="N",
                   help="also export heatmaps for the first N clips")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render saved JSON reports")
    p.add_argument("reports", nargs="+")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("heatmaps", help="export attention-map tensors")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.add_argument("clip_ids", nargs="+")
    p.set_defaults(fn=cmd_heatmaps)

    p = sub.add_parser("ablate", help="run the fusion/initialization grid")
    _add_config_args(p)
    p.add_argument("--stage1-steps", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
