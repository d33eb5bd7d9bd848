"""
Command line entry point.

Subcommands
-----------
synth          draw a synthetic instance and write ``train.coo``, ``test.coo``
               and ``manifest.json``
complete       run an optimizer and write ``history.csv``, ``summary.json``
               and ``factors.npz``
bench-mttkrp   time the sparse MTTKRP (per mode, 1-based) and the full gradient
               path against the matricize-and-multiply baseline
eval           RMSE of saved factors on a COO file

``history.csv`` has the header
``t,objective,train_rmse,test_rmse,grad_norm,stepsize,seconds``; floats are
written with ``repr`` so that reruns can be compared exactly, and missing
values (no test set, no step at ``t = 0``) are empty fields.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cp_model import ProblemConfig, rmse
from .data import init_factors, parse_ratings, split_train_test
from .exceptions import DivergenceError, DomainError, NumericalError, ParseError, ResourceError
from .kernels import (
    fast_gradient_path,
    naive_gradient_path,
    num_chunks,
    residual_at_observed,
    sparse_mttkrp,
    sparse_unfold,
)
from .optim import METHODS, RULES, OptimizerConfig, run
from .synth import SynthConfig, generate, write_synth
from .tensor_core import ObservedTensor, khatri_rao_others, read_coo

HISTORY_FIELDS = ("t", "objective", "train_rmse", "test_rmse", "grad_norm", "stepsize", "seconds")

logger = logging.getLogger("riemtc")


def _int_tuple(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("entries must be positive")
    return vals


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid int value: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid float value: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _fmt(v):
    return "" if v is None else repr(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riemtc", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic completion instance")
    s.add_argument("--dims", type=_int_tuple, required=True)
    s.add_argument("--tucker-rank", type=_int_tuple, required=True)
    s.add_argument("--p", type=float, required=True, help="sampling rate")
    s.add_argument("--snr-db", type=float, default=None, help="noise level; omit for noiseless data")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", type=_positive_float, default=1.0, help="multiplier applied to the tensor")
    s.add_argument("--normalize", action="store_true",
                   help="rescale the low-rank tensor to unit mean square before --scale")
    s.add_argument("--test-fraction", type=_positive_float, default=None,
                   help="test set size as a multiple of |Omega| (default: full complement)")
    s.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("complete", help="run a completion algorithm")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="in_dir", type=Path, help="directory with train.coo and optional test.coo")
    src.add_argument("--train", type=Path, help="training COO file")
    src.add_argument("--ratings", type=Path, help="UserID::MovieID::Rating::Timestamp file")
    c.add_argument("--test", type=Path, help="test COO file (with --train)")
    c.add_argument("--split", type=float, default=0.8, help="training ratio for --ratings")
    c.add_argument("--split-seed", type=int, default=0)
    c.add_argument("--method", choices=METHODS, default="rgd")
    c.add_argument("--rule", choices=RULES, default="rbb2")
    c.add_argument("--rank", type=_positive_int, required=True)
    lam = c.add_mutually_exclusive_group()
    lam.add_argument("--lambda", dest="lam", type=float, default=None)
    lam.add_argument("--lambda-over-p", type=float, default=None, help="sets lambda = value / p")
    c.add_argument("--delta", type=_positive_float, default=None)
    c.add_argument("--grad-tol", type=_positive_float, default=1e-7)
    c.add_argument("--relchg-tol", type=float, default=1e-6, help="<= 0 disables the test")
    c.add_argument("--max-iters", type=int, default=1000)
    c.add_argument("--time-budget", type=_positive_float, default=None, help="seconds")
    c.add_argument("--seed", type=int, default=0, help="initialization seed")
    c.add_argument("--safeguard", action="store_true", help="Armijo backtracking on RBB trial steps")
    c.add_argument("--armijo-sigma", type=float, default=1e-4)
    c.add_argument("--armijo-beta", type=float, default=0.5)
    c.add_argument("--s-min", type=_positive_float, default=1e-12)
    c.add_argument("--test-subsample", type=_positive_int, default=None,
                   help="evaluate test RMSE on this many randomly chosen test entries")
    c.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("bench-mttkrp", help="time fast vs naive gradient paths")
    b.add_argument("--dims", type=_int_tuple, default=(200, 200, 200))
    b.add_argument("--nnz", type=_positive_int, default=1_000_000)
    b.add_argument("--rank", type=_positive_int, default=15)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=_positive_int, default=3)
    b.add_argument("--skip-naive", action="store_true")
    b.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")

    e = sub.add_parser("eval", help="RMSE of saved factors on a COO file")
    e.add_argument("--factors", type=Path, required=True, help="factors.npz written by complete")
    e.add_argument("--data", type=Path, required=True)
    return parser


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(dims=args.dims, tucker_rank=args.tucker_rank, p=args.p, snr_db=args.snr_db,
                      seed=args.seed, scale=args.scale, test_fraction=args.test_fraction,
                      normalize=args.normalize)
    data = generate(cfg)
    man = write_synth(args.out, cfg, data)
    print(f"wrote {man['n_train']} training and {man['n_test']} test entries to {args.out}")
    return 0


def _load_inputs(args):
    """Return ``(train, test, extra_summary)``."""
    extra = {}
    if args.in_dir is not None:
        train = read_coo(args.in_dir / "train.coo")
        test_path = args.in_dir / "test.coo"
        test = read_coo(test_path) if test_path.exists() else None
        man = args.in_dir / "manifest.json"
        if man.exists():
            extra["manifest"] = json.loads(man.read_text())
    elif args.train is not None:
        train = read_coo(args.train)
        test = read_coo(args.test) if args.test is not None else None
    else:
        full, epoch = parse_ratings(args.ratings, with_epoch=True)
        train, test = split_train_test(full, args.split, args.split_seed)
        extra.update(ratings_epoch=epoch, split=args.split, split_seed=args.split_seed)
    if test is not None and test.dims != train.dims:
        raise DomainError(f"test dims {test.dims} differ from train dims {train.dims}")
    if test is not None and args.test_subsample is not None and args.test_subsample < test.nnz:
        rng = np.random.default_rng(args.seed)
        test = test.subset(np.sort(rng.choice(test.nnz, size=args.test_subsample, replace=False)))
    return train, test, extra


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([_fmt(getattr(rec, f)) for f in HISTORY_FIELDS])


def cmd_complete(args) -> int:
    train, test, extra = _load_inputs(args)
    p = train.sampling_rate
    if args.lambda_over_p is not None:
        lam = args.lambda_over_p / p
    else:
        lam = 0.0 if args.lam is None else args.lam
    problem = ProblemConfig.from_data(train, args.rank, lam)
    cfg = OptimizerConfig(
        method=args.method,
        stepsize_rule=args.rule,
        grad_tol=args.grad_tol,
        relchg_tol=args.relchg_tol if args.relchg_tol > 0 else None,
        max_iters=args.max_iters,
        time_budget=args.time_budget,
        armijo_sigma=args.armijo_sigma,
        armijo_beta=args.armijo_beta,
        s_min=args.s_min,
        delta=args.delta,
        safeguard=args.safeguard,
    )
    init = init_factors(train.dims, args.rank, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)

    status = 0
    try:
        result = run(train, problem, init, cfg, test=test)
        factors, history, reason, delta = result.factors, result.history, result.stop_reason, result.delta
    except DivergenceError as exc:
        logger.error("%s", exc)
        factors, history, reason, delta = exc.last_factors, exc.history, "diverged", None
        status = 3

    write_history(args.out / "history.csv", history)
    np.savez(args.out / "factors.npz", *factors)
    last = history[-1] if history else None
    summary = {
        "method": args.method,
        "rule": args.rule,
        "rank": args.rank,
        "iters": last.t if last else 0,
        "stop_reason": reason,
        "final_train_rmse": last.train_rmse if last else None,
        "final_test_rmse": last.test_rmse if last else None,
        "final_objective": last.objective if last else None,
        "seconds": last.seconds if last else None,
        "delta": delta,
        "lambda": lam,
        "p": p,
        "dims": list(train.dims),
        "n_train": train.nnz,
        "n_test": test.nnz if test is not None else 0,
        "init_seed": args.seed,
        "threads": num_chunks(),
    }
    summary.update(extra)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{reason} after {summary['iters']} iterations: train RMSE {summary['final_train_rmse']:.3e}"
          + (f", test RMSE {summary['final_test_rmse']:.3e}" if summary["final_test_rmse"] is not None else ""))
    return status


def random_instance(dims, nnz, rank, seed):
    """Uniformly sampled index set with Gaussian values and factors (benchmark input)."""
    rng = np.random.default_rng(seed)
    total = int(np.prod(dims, dtype=np.int64))
    if nnz > total:
        raise DomainError(f"nnz={nnz} exceeds the {total} entries of the tensor")
    lin = rng.choice(total, size=nnz, replace=False)
    subs = np.column_stack(np.unravel_index(lin, dims))
    data = ObservedTensor(dims, subs + 1, rng.standard_normal(nnz))
    return data, init_factors(dims, rank, seed + 1)


def _best_time(fn, repeats):
    fn()  # warm-up (JIT compilation for the fast kernels)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    data, factors = random_instance(args.dims, args.nnz, args.rank, args.seed)
    res = residual_at_observed(factors, data)
    kernels = {"fast": lambda i: sparse_mttkrp(res, data.subs, factors, i)}
    paths = {"fast": fast_gradient_path}
    if not args.skip_naive:
        kernels["naive"] = lambda i: sparse_unfold(res, data.subs, data.dims, i) @ khatri_rao_others(factors, i)
        paths["naive"] = naive_gradient_path
    rows = []
    for name, kern in kernels.items():
        for i in range(len(factors)):
            rows.append((name, i + 1, data.nnz, args.rank, _best_time(lambda: kern(i), args.repeats)))
        # full gradient path: residual, every MTTKRP and every Gram matrix
        rows.append((name, "all", data.nnz, args.rank,
                     _best_time(lambda: paths[name](factors, data), args.repeats)))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kernel", "mode", "omega_size", "rank", "seconds"))
        for row in rows:
            w.writerow(row[:4] + (repr(row[4]),))
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_eval(args) -> int:
    with np.load(args.factors) as npz:
        factors = tuple(npz[f"arr_{i}"] for i in range(len(npz.files)))
    data = read_coo(args.data)
    print(repr(rmse(factors, data)))
    return 0


COMMANDS = {"synth": cmd_synth, "complete": cmd_complete, "bench-mttkrp": cmd_bench, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DomainError, ParseError, ResourceError, NumericalError) as exc:
        print(f"riemtc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"riemtc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
