"""Command-line entry point: ``quicfl <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path

import numpy as np

from . import codecs, harness
from .errors import QuicFLError
from .solver import SolverOptions, solve_table
from .tables import QuantConfig, parse_rational, read_table, validate_table, write_table


def read_vector(path) -> np.ndarray:
    """Vector file: u64 little-endian length, then that many little-endian f32 values."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise QuicFLError(f"{path}: missing length prefix")
    (n,) = struct.unpack_from("<Q", data)
    if len(data) != 8 + 4 * n:
        raise QuicFLError(f"{path}: length prefix says {n} values, file holds {(len(data) - 8) / 4:g}")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)


def write_vector(path, x) -> None:
    x = np.asarray(x, dtype="<f4")
    Path(path).write_bytes(struct.pack("<Q", x.size) + x.tobytes())


def _rational(text):
    try:
        return parse_rational(text)
    except (ValueError, ZeroDivisionError, QuicFLError) as exc:
        raise argparse.ArgumentTypeError(f"expected num/den, got {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _rational_list(text):
    return [_rational(v) for v in text.split(",")]


def _table_for(args, b, ell):
    if getattr(args, "table", None):
        return read_table(args.table)
    return harness.load_default_table(b, ell, args.m, args.p)


def cmd_solve(args) -> int:
    cfg = QuantConfig(b=args.b, ell=args.l, m=args.m, p=args.p)
    opts = SolverOptions(restarts=args.restarts, max_iters=args.max_iters, seed=args.seed,
                         n_jobs=args.threads)
    res = solve_table(cfg, opts)
    write_table(res.table, args.output)
    print(f"objective={res.objective:.9g} max_unbias_violation={res.max_unbias_violation:.3g} "
          f"restart={res.restart_index} -> {args.output}")
    return 0


def cmd_validate(args) -> int:
    table = read_table(args.table)
    diag = validate_table(table)
    cfg = table.config
    print(f"b={cfg.b} l={cfg.ell} m={cfg.m} p={cfg.p} T={cfg.T:.17g} hash={table.table_hash:016x}")
    for name, value in vars(diag).items():
        print(f"{name}={value:.3g}" if isinstance(value, float) else f"{name}={value}")
    bad = diag.failures()
    if bad:
        print("INVALID: " + ", ".join(bad))
        return 1
    print("OK")
    return 0


def cmd_encode(args) -> int:
    table = read_table(args.table)
    x = read_vector(args.input)
    enc = codecs.encode_alg1 if args.alg1 else codecs.encode_quicfl
    msg = enc(x, table, args.global_seed, args.client_seed, args.private_seed)
    Path(args.output).write_bytes(msg.to_bytes())
    return 0


def cmd_decode(args) -> int:
    table = read_table(args.table)
    msgs = [codecs.EncodedVector.from_bytes(Path(p).read_bytes()) for p in args.messages]
    write_vector(args.output, codecs.decode_aggregate(msgs, table, args.global_seed))
    return 0


def cmd_bench_nmse(args) -> int:
    cfg = harness.ExperimentConfig(scheme=args.scheme, n=args.n, d=args.d, b=args.b, ell=args.l,
                                   p=args.p, dist=args.dist, trials=args.trials, seed=args.seed,
                                   m=args.m, spikes=args.spikes, threads=args.threads)
    table = _table_for(args, cfg.b, cfg.ell) if cfg.scheme.startswith("quicfl") else None
    rep = harness.run_dme(cfg, table)
    row = harness.report_row(cfg, rep)
    if args.output:
        harness.write_csv([row], args.output)
    print(f"nmse={rep.nmse:.6g} vnmse={rep.vnmse:.6g} chi={rep.chi_estimate:.6g} "
          f"bits_per_coord={rep.bits_per_coord:.6g} outlier_fraction={rep.outlier_fraction:.3g}")
    return 0


def cmd_bench_sweep(args) -> int:
    opts = SolverOptions(restarts=args.restarts, seed=args.seed, n_jobs=args.threads)
    rows = harness.sweep(args.b, args.l, args.p, m=args.m, opts=opts)
    harness.write_csv([r.as_dict() for r in rows], args.output)
    for r in rows:
        flag = "" if r.ok else "  FAILED"
        print(f"b={r.b} l={r.ell} p={r.p} chi={r.chi:.6g}{flag}")
    return 0 if all(r.ok for r in rows) else 1


def cmd_bench_power(args) -> int:
    cfg = harness.ExperimentConfig(scheme=args.scheme, n=args.n, d=args.d, b=args.b, ell=args.l,
                                   p=args.p, seed=args.seed, m=args.m)
    table = None
    if cfg.scheme.startswith("quicfl") and cfg.b < 32:
        table = _table_for(args, cfg.b, cfg.ell)
    res = harness.power_iteration(cfg, args.rounds, args.learning_rate, table=table)
    rows = [{"round": i + 1, "error": e} for i, e in enumerate(res.errors)]
    if args.output:
        harness.write_csv(rows, args.output)
    print(f"final_error={res.errors[-1]:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quicfl", description="Unbiased vector quantization with shared randomness.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, threads=True):
        p.add_argument("--p", type=_rational, default=parse_rational("1/512"),
                       help="outlier fraction as num/den (default 1/512)")
        p.add_argument("--m", type=int, default=512, help="number of quantiles")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")

    p = sub.add_parser("solve", help="solve a quantization table")
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--l", type=int, required=True, help="shared random bits")
    common(p)
    p.add_argument("--restarts", type=int, default=16)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="check a table file")
    p.add_argument("table")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("encode", help="encode one vector file")
    p.add_argument("--table", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--global-seed", type=int, required=True)
    p.add_argument("--client-seed", type=int, required=True)
    p.add_argument("--private-seed", type=int, required=True)
    p.add_argument("--alg1", action="store_true", help="use the quantile-first encoder")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="average one or more encoded messages")
    p.add_argument("--table", required=True)
    p.add_argument("--global-seed", type=int, required=True)
    p.add_argument("messages", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench-nmse", help="measure NMSE and vNMSE")
    p.add_argument("--scheme", choices=harness.SCHEMES, default="quicfl")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--d", type=int, default=1 << 16)
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--l", type=int, default=None)
    p.add_argument("--dist", choices=harness.DISTS, default="normal")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--spikes", type=int, default=1)
    p.add_argument("--table")
    common(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench_nmse)

    p = sub.add_parser("bench-sweep", help="solve and score a (b, l, p) grid")
    p.add_argument("--b", type=_int_list, required=True, help="e.g. 1,2,3")
    p.add_argument("--l", type=_int_list, required=True, help="e.g. 0,1,2")
    p.add_argument("--p", type=_rational_list, default=[parse_rational("1/512")])
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_bench_sweep)

    p = sub.add_parser("bench-power", help="distributed power iteration")
    p.add_argument("--scheme", choices=harness.SCHEMES, default="quicfl")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--l", type=int, default=None)
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--table")
    common(p, threads=False)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench_power)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (QuicFLError, ValueError, OSError) as exc:
        print(f"quicfl {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
