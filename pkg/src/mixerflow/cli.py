"""Command-line entry points: train, eval, sample, check, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .checks import perturb, run_checks
from .config import load_config
from .errors import MixerFlowError
from .gradcheck import check_gradients
from .model import build_model
from .train import evaluate, sample_cmd, train


def _cmd_train(args) -> int:
    run = load_config(args.config)
    over = {"data_dir": args.data_dir}
    for key in ("steps", "batch_size", "seed", "shuffle"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    if args.out is not None:
        over["out_dir"] = args.out
    run = run.replace(**over)
    result = train(run)
    step, mean, se = result.val_history[-1]
    print(f"final step={step} val_bpd={mean!r} stderr={se!r} checkpoint={result.out_dir / 'checkpoint'}")
    return 0


def _cmd_eval(args) -> int:
    mean, se = evaluate(args.checkpoint, args.data_dir, args.split)
    print(f"split={args.split} bpd={mean!r} stderr={se!r}")
    return 0


def _cmd_sample(args) -> int:
    paths = sample_cmd(args.checkpoint, args.count, args.seed, args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_check(args) -> int:
    results = run_checks(args.scope, fault=args.fault)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _cmd_gradcheck(args) -> int:
    run = load_config(args.config)
    cfg = run.model
    cfg.precision = "double"
    model = build_model(cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    x = rng.random((args.batch, *cfg.geometry.image_shape))
    model.initialize(x)
    perturb(model, 0.05, cfg.seed + 1)
    rep = check_gradients(model, x, args.step, args.tolerance, args.samples, cfg.seed)
    print(f"CHECK gradients {'PASS' if rep.passed else 'FAIL'} {rep.max_rel_error:.3e} "
          f"n={rep.n_checked} worst={rep.worst_parameter}")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixerflow")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train")
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--shuffle", choices=["none", "local", "global"])
    t.add_argument("--out")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", choices=["train", "val"], default="val")
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("sample")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sample)

    c = sub.add_parser("check")
    c.add_argument("--scope", choices=["layers", "model", "gradients", "data", "all"], default="all")
    c.add_argument("--fault", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(fn=_cmd_check)

    g = sub.add_parser("gradcheck")
    g.add_argument("--config", required=True)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(fn=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (MixerFlowError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
