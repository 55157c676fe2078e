"""Command-line entry point: ``structdrop <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from structdrop import bench as bench_mod
from structdrop.checks import GRADCHECK_TOL, KERNEL_TOL, gradcheck, verify_kernels
from structdrop.corpus import CorpusError, synthetic_text
from structdrop.model import MODE_LABELS, CheckpointError, load_checkpoint
from structdrop.trainer import ConfigError, evaluate, load_train_config, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

_PRECISION = {"f32": "single", "f64": "double"}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="structdrop", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="train a language model from a JSON config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--mode", choices=MODE_LABELS, default=None, help="override the dropout mode")
    p.add_argument("--precision", choices=sorted(_PRECISION), default=None, help="override precision")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="config whose corpus and split fractions to use")
    p.add_argument("--split", choices=("valid", "test"), default="valid")

    p = sub.add_parser("bench", help="time dense vs compacted GEMMs per training phase", formatter_class=fmt)
    p.add_argument("--config", required=True, help="BenchConfig JSON file")
    p.add_argument("--threads", type=int, default=None, help="override kernel thread count")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network (double)",
                       formatter_class=fmt)
    p.add_argument("--h", type=int, default=8, help="hidden size")
    p.add_argument("--b", type=int, default=4, help="batch size")
    p.add_argument("--t", type=int, default=5, help="unroll length")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--mode", choices=MODE_LABELS, default="nr-rh-st")
    p.add_argument("--kernel", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify-kernels", help="randomised dense-oracle check of the sparse kernels",
                       formatter_class=fmt)
    p.add_argument("--trials", type=int, default=100, help="instances per kernel")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-corpus", help="write a deterministic synthetic text corpus", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--bytes", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _train(args) -> int:
    config = load_train_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if args.precision is not None:
        config.precision = _PRECISION[args.precision]
    if args.mode is not None:
        config.model = config.model.with_mode(args.mode)
    report = train(config)
    for r in report.epochs:
        print(f"epoch {r.epoch}: train {r.train_loss:.4f}  valid {r.valid_loss:.4f}  "
              f"ppl {r.valid_ppl:.3f}  lr {r.lr:.4g}  {r.wall_seconds:.1f}s")
    if report.test_ppl is not None:
        print(f"test loss {report.test_loss:.4f}  ppl {report.test_ppl:.3f}")
    print(f"wrote {Path(config.out_dir).resolve()}")
    return EXIT_OK


def _eval(args) -> int:
    config = load_train_config(args.config)
    params = load_checkpoint(args.checkpoint)
    config.precision = "single" if params.dtype.itemsize == 4 else "double"
    loss, ppl = evaluate(params, config, args.split)
    print(f"{args.split} loss {loss:.12f}  perplexity {ppl:.4f}")
    return EXIT_OK


def _bench(args) -> int:
    try:
        config = bench_mod.BenchConfig.from_json(args.config)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.threads is not None:
        config = dataclasses.replace(config, threads=args.threads)
    try:
        records = bench_mod.bench_suite(config)
    except bench_mod.CorrectnessError as exc:
        print(f"correctness gate failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"{'phase':8}{'mode':20}{'H':>6}{'B':>5}{'T':>5}{'p':>6}{'speedup':>9}{'flop ratio':>12}{'ref':>7}")
    for r in records:
        ref = bench_mod.REFERENCE_SPEEDUPS.get(r.mode, {}).get(r.phase)
        print(f"{r.phase:8}{r.mode:20}{r.H:6}{r.B:5}{r.T:5}{r.p:6.2f}{r.speedup:9.3f}"
              f"{r.flops_sparse / r.flops_dense:12.4f}{'' if ref is None else f'{ref:7.2f}'}")
    print(f"wrote {config.out}")
    return EXIT_OK


def _gradcheck(args) -> int:
    start = time.perf_counter()
    res = gradcheck(hidden=args.h, batch=args.b, steps=args.t, layers=args.layers, mode=args.mode,
                    seed=args.seed, kernel_mode=args.kernel)
    print(f"gradcheck mode={args.mode} H={args.h} B={args.b} T={args.t} L={args.layers}: "
          f"{res.n_params} parameters, max relative error {res.max_rel_error:.3e} "
          f"(tolerance {GRADCHECK_TOL:g}) in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if res.passed else EXIT_VERIFY


def _verify(args) -> int:
    checks = verify_kernels(args.trials, args.seed)
    failed = [c for c in checks if not c.passed]
    worst = max((c.error for c in checks), default=0.0)
    for c in failed:
        print(f"FAIL {c.kernel} shape={c.shape} p={c.rate} err={c.error:.3e} zeros_exact={c.zeros_exact}")
    print(f"{len(checks) - len(failed)}/{len(checks)} kernel checks passed "
          f"(max relative error {worst:.3e}, tolerance {KERNEL_TOL:g})")
    return EXIT_VERIFY if failed else EXIT_OK


def _synth(args) -> int:
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(synthetic_text(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {path}")
    return EXIT_OK


_COMMANDS = {"train": _train, "eval": _eval, "bench": _bench, "gradcheck": _gradcheck,
             "verify-kernels": _verify, "synth-corpus": _synth}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CorpusError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
