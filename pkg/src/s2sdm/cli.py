"""Command-line entry point.

One subcommand per pipeline stage; every stage reads and writes a
single run directory. Errors map to exit codes: usage and parse
problems exit 1, a failed gradient or oracle self-check exits 2, and a
numerical blow-up mid-run exits 3.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import TrainConfig, load_config, parse_config
from .errors import NumericalError, UsageError, VerificationFailure


def _add_common(sub, checkpoint=False):
    sub.add_argument("--config", metavar="PATH",
                     help="key=value config file; defaults apply without it")
    sub.add_argument("--seed", type=int, metavar="INT",
                     help="override the config seed")
    sub.add_argument("--out", required=True, metavar="DIR",
                     help="run directory")
    if checkpoint:
        sub.add_argument("--checkpoint", metavar="PATH",
                         help="checkpoint to start from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2sdm",
        description="distribution-matching seq2seq training at desk scale",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    _add_common(subs.add_parser(
        "gen-data", help="generate the configured task's splits"))
    _add_common(subs.add_parser(
        "pretrain", help="likelihood-pretrain the model and both augmenters"))
    _add_common(subs.add_parser(
        "train-dm", help="alternating distribution-matching training"),
        checkpoint=True)
    _add_common(subs.add_parser(
        "train-mle", help="maximum-likelihood baseline"), checkpoint=True)
    _add_common(subs.add_parser(
        "train-rl", help="policy-gradient fine-tuning baseline"),
        checkpoint=True)
    _add_common(subs.add_parser(
        "train-raml", help="payoff-sampled likelihood baseline"),
        checkpoint=True)

    ev = subs.add_parser("eval", help="beam-decode a split and score it")
    _add_common(ev, checkpoint=True)
    ev.add_argument("--split", default="test",
                    choices=("train", "dev", "test"))

    sa = subs.add_parser("sample", help="dump augmenter draws and decodes")
    _add_common(sa, checkpoint=True)
    sa.add_argument("--pairs", type=int, default=3, metavar="N")
    sa.add_argument("--samples", type=int, default=3, metavar="N")

    _add_common(subs.add_parser(
        "grad-check", help="finite-difference check of every gradient"))
    _add_common(subs.add_parser(
        "oracle-check", help="estimators against enumeration oracles"))
    return parser


def _config_from(args) -> TrainConfig:
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.config is not None:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def _require_checkpoint(args) -> str:
    if args.checkpoint is None:
        raise UsageError(f"{args.command} needs --checkpoint")
    return args.checkpoint


def _dev_line(result: dict) -> str:
    dev = result["dev"]
    return (f"epochs={result['epochs_run']} dev_bleu={dev['bleu']:.2f} "
            f"dev_exact={dev['exact']:.4f}")


def _run(args) -> None:
    config = _config_from(args)
    out = args.out
    if args.command == "gen-data":
        result = harness.cmd_gen_data(config, out)
        sizes = " ".join(f"{k}={v}" for k, v in result["sizes"].items())
        print(f"wrote {result['paths']['vocab']} and splits ({sizes})")
    elif args.command == "pretrain":
        result = harness.cmd_pretrain(config, out)
        print(f"pretrain done: {_dev_line(result)}")
    elif args.command == "train-dm":
        result = harness.cmd_train_dm(config, out, _require_checkpoint(args))
        print(f"train-dm done: {_dev_line(result)}")
    elif args.command in ("train-mle", "train-rl", "train-raml"):
        kind = args.command.removeprefix("train-")
        result = harness.cmd_train_baseline(config, kind, out,
                                            args.checkpoint)
        print(f"{args.command} done: {_dev_line(result)}")
    elif args.command == "eval":
        result = harness.cmd_eval(config, out, _require_checkpoint(args),
                                  args.split)
        print(f"{args.split}: BLEU {result['bleu']:.1f}, "
              f"exact-match {result['exact']:.4f}, "
              f"mean log-prob {result['mean_log_prob']:.4f} "
              f"({result['n_pairs']} pairs)")
    elif args.command == "sample":
        print(harness.cmd_sample(config, out, _require_checkpoint(args),
                                 args.pairs, args.samples))
    elif args.command == "grad-check":
        result = harness.cmd_grad_check(config, out)
        for check in result["checks"]:
            print(f"pass {check['check']}: max_rel_err="
                  f"{check['max_rel_err']:.3e} over {check['n_coords']} coords")
    elif args.command == "oracle-check":
        result = harness.cmd_oracle_check(config, out)
        for check in result["checks"]:
            print(f"pass {check['check']}: {check['statistic']:.6g} "
                  f"(threshold {check['threshold']:.6g})")
    else:  # pragma: no cover - argparse rejects unknown commands
        raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except UsageError as err:  # ParseError included
        print(f"error: {err}", file=sys.stderr)
        return 1
    except VerificationFailure as err:
        print(f"verification failure: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3
    return 0
