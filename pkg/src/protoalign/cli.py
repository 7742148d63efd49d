"""Command-line entry point: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 success, 2 usage error (bad flag, unknown config key, invalid
override, missing input), 3 runtime failure. Errors are printed to stderr
as a single ``error: kind=... message=...`` line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protoalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=False, out=True):
        p.add_argument("--config", type=Path, help="INI file with data/model/train/dict/eval sections")
        p.add_argument("--seed", type=int, help="shorthand for --override train.seed=N (gen-data: data.seed)")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="repeatable; wins over file values")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    common(sub.add_parser("gen-data", help="write a synthetic two-domain dataset"))
    common(sub.add_parser("train", help="train and write checkpoint, history and per-epoch metrics"), data=True)
    p_eval = sub.add_parser("eval", help="score a checkpoint on the target test split")
    common(p_eval, data=True)
    p_eval.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory written by train")
    p_abl = sub.add_parser("ablate", help="run an ablation grid and write a comparison CSV")
    common(p_abl, data=True)
    p_abl.add_argument("--grid", action="append", choices=["losses", "aggregation", "dict_size"],
                       help="repeatable; default: all three")
    p_abl.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every loss in double precision")
    common(p_gc, out=False)
    p_gc.add_argument("--cases", type=int, default=20, help="random instances per loss")
    p_gc.add_argument("--tol", type=float, default=1e-4)
    return parser


def resolve_config(args) -> Config:
    cfg = load_config(args.config)
    overrides = list(args.override)
    if args.seed is not None:
        key = "data.seed" if args.command == "gen-data" else "train.seed"
        overrides.insert(0, f"{key}={args.seed}")
    return cfg.with_overrides(overrides)


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise UsageError(f"{what} {path} does not exist")


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        if getattr(args, "data", None) is not None:
            _require_dir(args.data, "dataset directory")
        if getattr(args, "checkpoint", None) is not None:
            _require_dir(args.checkpoint, "checkpoint directory")
    except (UsageError, ConfigError) as exc:
        _error("usage", exc)
        return EXIT_USAGE
    try:
        return _dispatch(args, cfg)
    except (FileNotFoundError, ConfigError) as exc:
        _error("usage", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        _error(type(exc).__name__, exc)
        return EXIT_RUNTIME


def _dispatch(args, cfg: Config) -> int:
    from . import trainer

    if args.command == "gen-data":
        from .data import generate_dataset, write_dataset

        write_dataset(generate_dataset(cfg.data), cfg.data, args.out)
        cfg.write(Path(args.out) / "config.ini")
        print(f"dataset written to {args.out}")
        return EXIT_OK
    if args.command == "train":
        result = trainer.train(cfg, args.data, args.out, log=_log)
        print(f"final target dice {result.final_dice():.4f}; outputs in {result.out_dir}")
        return EXIT_OK
    if args.command == "eval":
        summary = trainer.evaluate_checkpoint(cfg, args.checkpoint, args.data, args.out)
        for m in summary:
            print(f"class {m.class_id}: dice={m.dice} asd={m.asd}")
        return EXIT_OK
    if args.command == "ablate":
        for grid in args.grid or ["losses", "aggregation", "dict_size"]:
            rows = trainer.ablate(cfg, args.data, args.out, grid, args.seeds, log=_log)
            for row in rows:
                print(f"{grid}\t{row.label}\tdice={row.average('dice')}")
        return EXIT_OK
    if args.command == "gradcheck":
        from .gradcheck import run_suite

        results = run_suite(cases=args.cases, seed=cfg.train.seed)
        failed = [r for r in results if r.max_error > args.tol]
        for r in results:
            status = "PASS" if r.max_error <= args.tol else "FAIL"
            print(f"{status}\t{r.name}\tcases={r.cases}\tmax_rel_error={r.max_error:.3e}")
        return EXIT_OK if not failed else EXIT_RUNTIME
    raise UsageError(f"unknown command {args.command}")


def _error(kind: str, exc: Exception) -> None:
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: kind={kind} message={message}", file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
