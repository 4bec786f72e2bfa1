"""Command-line driver: train, eval, bench, gradcheck, blocklen.

Flags mirror the flat key=value config format one to one, and a ``--config``
file can supply any of them; explicit flags win over file values.  Every
command is reproducible from (config, seed).
"""

from __future__ import annotations

import argparse
import math
import sys

from .bench import KINDS, count_score_elements, scaling_experiment
from .config import build_run_config, load_config_file
from .encoder import select_block_length, select_block_length_batched
from .train import evaluate_checkpoint, full_model_gradcheck, train_run

__all__ = ["main"]

# argparse dests that feed build_run_config, in config-key spelling
_CONFIG_FLAGS = (
    "seed", "out", "task", "vocab", "mu", "sigma", "classes",
    "train_size", "val_size", "d_e", "d_h", "r", "keep_prob", "c",
    "activation", "steps", "batch", "optimizer", "gamma", "eval_every",
    "variant",
)

_BENCH_LENGTHS = (64, 128, 192, 256, 320, 384, 448, 512)


def _r_value(text: str):
    if text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected 'auto' or an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("block length must be >= 1")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("need at least one length")
    return values


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="key=value file; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--task", choices=("order-pair", "copy-class", "parity"))
    p.add_argument("--vocab", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--val-size", type=int)
    p.add_argument("--d-e", type=int)
    p.add_argument("--d-h", type=int)
    p.add_argument("--r", type=_r_value, help="block length, 'auto' or int")
    p.add_argument("--keep-prob", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--activation")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=("adadelta", "adam"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--variant", choices=("full", "none-mask", "s2t-only"))


def _config_from_args(args) -> dict:
    values = load_config_file(args.config) if args.config else {}
    for key in _CONFIG_FLAGS:
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    return values


def cmd_train(args) -> int:
    cfg = build_run_config(_config_from_args(args))
    result = train_run(cfg)
    print(f"wrote {result.metrics_path}")
    print(f"wrote {result.model_path}")
    print(f"best val_acc {result.best_val:.4f}")
    print(f"final val_acc {result.final_val:.4f}")
    return 0


def cmd_eval(args) -> int:
    acc, cfg = evaluate_checkpoint(args.model)
    print(f"variant {cfg.train.variant}")
    print(f"val_acc {acc:.4f}")
    return 0


def cmd_bench(args) -> int:
    kinds = KINDS if args.kind == "both" else (args.kind,)
    records, slopes = scaling_experiment(
        args.lengths, d_e=args.d_e, kinds=kinds, repeats=args.repeats,
        seed=args.seed, csv_path=args.out)
    for kind in kinds:
        print(f"{kind}: measured slope {slopes[kind]:.3f}")
    if len(kinds) == 2:
        n_top = max(args.lengths)
        peak = {rec.kind: rec.measured_peak_elems
                for rec in records if rec.n == n_top}
        print(f"peak ratio at n={n_top}: "
              f"{peak['full_san'] / peak['biblosa']:.1f}x")
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = full_model_gradcheck(n=args.n, d=args.d, r=args.r,
                                 seed=args.seed, step=args.step)
    print(f"worst relative error {worst:.3e} "
          f"(n={args.n}, d={args.d}, r={args.r}, seed={args.seed})")
    if worst < args.tol:
        print(f"PASS (tol {args.tol:g})")
        return 0
    print(f"FAIL (tol {args.tol:g})")
    return 1


def cmd_blocklen(args) -> int:
    if args.n is not None and args.mu is not None:
        raise SystemExit("blocklen: give either --n or --mu, not both")
    try:
        if args.n is not None:
            n = args.n
            r = select_block_length(n)
        elif args.mu is not None:
            bound = args.sigma * math.sqrt(2.0 * math.log(args.batch)) + args.mu
            r = select_block_length_batched(args.mu, args.sigma, args.batch)
            n = max(1, int(math.floor(bound + 0.5)))
            print(f"expected max length {bound:.2f} "
                  f"(mu {args.mu:g}, sigma {args.sigma:g}, batch {args.batch})")
        else:
            raise SystemExit("blocklen: need --n or --mu")
    except ValueError as exc:
        raise SystemExit(f"blocklen: {exc}")

    def xi(rr: int) -> int:
        return count_score_elements(n, rr).total("biblosa")

    print(f"n {n}")
    print(f"r {r}")
    print(f"m {-(-n // r)}")
    print("  r  xi(r)")
    for rr in range(max(1, r - 1), min(n, r + 1) + 1):
        print(f"{rr:>3}  {xi(rr)}")
    best = min(range(1, n + 1), key=xi)
    print(f"brute-force optimum r* {best}  xi {xi(best)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockattn",
        description="Block self-attention sequence encoding toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a synthetic task")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("model", help="path to a model container file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="memory/time scaling sweep")
    p.add_argument("--lengths", type=_int_list,
                   default=list(_BENCH_LENGTHS),
                   help="comma-separated sequence lengths")
    p.add_argument("--d-e", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("both",) + KINDS, default="both")
    p.add_argument("--out", default="bench.csv", help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("blocklen",
                       help="show the block length a sequence length implies")
    p.add_argument("--n", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=64)
    p.set_defaults(func=cmd_blocklen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
