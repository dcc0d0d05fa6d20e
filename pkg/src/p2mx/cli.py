"""Command-line interface.

    p2mx synth  --spec <json> --out <dir> --seed <n>
    p2mx train  --config <file>
    p2mx refine --mesh <obj> --scene <dir> --ckpt <file> --iters <n> --out <obj>
    p2mx eval   --ckpt <file> --data <dir> --tau <f> --samples <n> --views <k> --report <json>

Errors print a single machine-parsable line `P2MX-ERR-<CODE>: message` to
stderr and exit nonzero.
"""

import argparse
import sys

import numpy as np

from . import autodiff as ad
from .config import parse_config
from .data import list_scenes
from .errors import P2mxError
from .losses import MetricConfig
from .model import RefineConfig
from .pipeline import evaluate_cmd, refine_cmd
from .synth import synth_dataset
from .train import train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"P2MX-ERR-USAGE: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise SystemExit(2)


def build_parser():
    parser = _Parser(prog="p2mx", description="multi-view mesh deformation pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="train from a config file")
    p_train.add_argument("--config", required=True)

    p_refine = sub.add_parser("refine", help="refine a mesh against a scene")
    p_refine.add_argument("--mesh", required=True)
    p_refine.add_argument("--scene", required=True)
    p_refine.add_argument("--ckpt", required=True)
    p_refine.add_argument("--iters", type=int, default=3)
    p_refine.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--tau", type=float, default=1e-4)
    p_eval.add_argument("--samples", type=int, default=10_000)
    p_eval.add_argument("--views", type=int, default=0)
    p_eval.add_argument("--iters", type=int, default=3)
    p_eval.add_argument("--report", required=True)

    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        count = synth_dataset(args.spec, args.out, args.seed)
        print(f"wrote {count} scenes to {args.out}")
        return 0
    if args.command == "train":
        ckpt, rows = train(parse_config(args.config))
        final = rows[-1][1] if rows else float("nan")
        print(f"trained {len(rows)} steps; final loss {final:.6f}; checkpoint {ckpt}")
        return 0
    if args.command == "refine":
        ad.set_default_dtype(np.float32)
        out = refine_cmd(args.mesh, args.scene, args.ckpt, args.iters, args.out)
        print(f"wrote {out}")
        return 0
    if args.command == "eval":
        ad.set_default_dtype(np.float32)
        scenes = list_scenes(args.data)
        rows = evaluate_cmd(args.ckpt, scenes,
                            MetricConfig(tau=args.tau, samples=args.samples),
                            RefineConfig(iterations=args.iters),
                            args.report, views_k=args.views or None)
        mean = rows[-1]
        print(f"evaluated {len(rows) - 1} scenes; mean cd {mean['cd']:.6f} "
              f"f_tau {mean['f_tau']:.2f}; report {args.report}")
        return 0
    raise P2mxError(f"unknown command {args.command}")


def main(argv=None):
    try:
        return run(argv)
    except P2mxError as exc:
        print(f"P2MX-ERR-{exc.code}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"P2MX-ERR-IO: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
