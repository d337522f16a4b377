"""``fedmsrw`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from .harness import ExperimentConfig, compare, evaluate, prepare
from .model import ModelConfig, SegNet, build_model, load_checkpoint, model_objective
from .synth import load_dataset
from .tensor import grad_check


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.output_dir
    data, _ = prepare(cfg, out)
    print(f"wrote {sum(len(v) for v in data.values())} cases for {len(data)} clients to {out}")
    return 0


def _run(cfg: ExperimentConfig, out, strategies) -> int:
    table = compare(cfg, out, strategies)
    sys.stdout.write(table.to_text())
    if table.errors:
        for name, msg in table.errors.items():
            print(f"error: {name}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    return _run(cfg, args.out or cfg.output_dir, [args.strategy])


def cmd_compare(args) -> int:
    cfg = _config(args)
    return _run(cfg, args.out or cfg.output_dir, args.strategy or None)


def cmd_eval(args) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.dataset)
    if args.client:
        samples = [s for s in samples if s.client_id == args.client]
        if not samples:
            raise ValueError(f"dataset has no cases for client {args.client!r}")
    report = evaluate(SegNet(model_cfg), params, samples)
    print(json.dumps({**report.as_dict(), "cases": len(samples)}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(blocks=args.blocks)
    worst = 0.0
    start = time.perf_counter()
    for seed in range(args.seeds):
        g = np.random.default_rng(seed)
        net, params = build_model(cfg, seed)
        x = g.standard_normal((1, cfg.in_channels, args.size, args.size))
        y = (g.random((1, 1, args.size, args.size)) < 0.3).astype(float)
        err = grad_check(*model_objective(net, x, y), params, h=args.h)
        worst = max(worst, err)
        print(f"seed {seed:3d}  max relative error {err:.3e}")
    print(f"worst {worst:.3e} over {args.seeds} seeds in {time.perf_counter() - start:.1f}s")
    if worst >= args.tol:
        print(f"error: gradient check above tolerance {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedmsrw", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic clients, ratios.csv and folds")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="cross-validated run of one strategy")
    p.add_argument("config")
    p.add_argument("--strategy", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="run every configured strategy on the same folds")
    p.add_argument("config")
    p.add_argument("--strategy", action="append", help="restrict to these (repeatable)")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--client")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--blocks", type=int, nargs="+", default=[8, 16, 16])
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
