"""Command-line entry point: ``ils-ssl <subcommand> ...``.

Every subcommand takes ``--config FILE``, ``--profile NAME`` and any number of
``--set section.key=value`` overrides.  On success a one-line JSON summary is
printed to stdout and the exit code is 0; failures print ``error: <command>:
<message>`` to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ils_ssl import pipeline as pl
from ils_ssl.checkpoint import CheckpointError
from ils_ssl.config import PROFILES, ConfigError, dump_config, load_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file layered over the profile")
    p.add_argument("--profile", default="desk-scale", choices=PROFILES)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config value, e.g. --set ssl.supervised_layers=[2,4]")
    p.add_argument("--force", action="store_true", help="load checkpoints whose config fingerprint differs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ils-ssl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpus splits")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="masked-prediction pre-training, iteration 1 or 2")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iteration", type=int, choices=(1, 2), required=True)
    p.add_argument("--prev", help="iteration-1 checkpoint (required for iteration 2)")
    p.add_argument("--labels", help="targets written by relabel (iteration 2)")
    p.add_argument("--resume", help="continue from this checkpoint of the same run")
    p.add_argument("--stop-at", type=int, help="stop after this step (the schedule still spans all steps)")
    p.add_argument("--log", help="training log path (default: <out>.log)")

    p = sub.add_parser("relabel", help="cluster a layer of a trained model into new targets")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="label file path")

    p = sub.add_parser("finetune", help="CTC fine-tuning of a pre-trained checkpoint")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("decode", help="LM-fused beam search over a corpus split")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="heldout", choices=pl.SPLITS)

    p = sub.add_parser("analyze", help="per-layer cluster quality table")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output prefix; writes <out>.tsv and <out>.json")

    p = sub.add_parser("show-config", help="print the resolved configuration")
    _common(p)
    return ap


def run(args: argparse.Namespace):
    cfg = load_config(args.config, args.profile, args.overrides)
    c = args.command
    if c == "show-config":
        sys.stdout.write(dump_config(cfg))
        return None
    if c == "gen-corpus":
        return pl.cmd_gen_corpus(cfg, args.out)
    if c == "pretrain":
        return pl.cmd_pretrain(cfg, args.corpus, args.out, args.iteration, args.prev, args.labels,
                               args.resume, args.stop_at, args.force, args.log)
    if c == "relabel":
        return pl.cmd_relabel(cfg, args.corpus, args.checkpoint, args.out, args.force)
    if c == "finetune":
        return pl.cmd_finetune(cfg, args.corpus, args.checkpoint, args.out, args.force, args.log)
    if c == "decode":
        return pl.cmd_decode(cfg, args.corpus, args.checkpoint, args.out, args.split, args.force)
    if c == "analyze":
        return pl.cmd_analyze(cfg, args.corpus, args.checkpoint, args.out, args.force)
    raise pl.PipelineError(f"unknown command {c}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ConfigError, CheckpointError, pl.PipelineError, ValueError, OSError) as e:
        print(f"error: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    if result is not None:
        print(pl.summary_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
