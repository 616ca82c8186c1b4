"""Distributed mean estimation experiments: NMSE measurement, sweeps and power iteration."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import codecs, prng
from .errors import DomainError, InfeasibleError, QuicFLError
from .solver import SolverOptions, embed_shared_bits, objective, s_step, solve_table
from .tables import QuantConfig, QuantTable, Rational, default_table_name, parse_rational, read_table
from .codecs import reference

log = logging.getLogger(__name__)

SCHEMES = ("quicfl", "quicfl_alg1", "bsq", "qsgd", "minmax_hadamard", "none")
DISTS = ("lognormal", "normal", "identical_lognormal", "sparse_spike")
TABLE_DIR_ENV = "QUICFL_TABLE_DIR"

# shared random bits per bit budget, following the parameter study
DEFAULT_ELL = {1: 6, 2: 5, 3: 4, 4: 4}


def default_ell(b: int) -> int:
    return DEFAULT_ELL.get(b, 4)


def find_table(b: int, ell: int, m: int = 512, p: Rational = Fraction(1, 512)) -> Optional[Path]:
    name = default_table_name(b, ell, m, p)
    env = os.environ.get(TABLE_DIR_ENV)
    if env and (Path(env) / name).is_file():
        return Path(env) / name
    packaged = resources.files("quicfl") / "data" / name
    if packaged.is_file():
        return Path(str(packaged))
    return None


def load_default_table(b: int, ell: int, m: int = 512, p: Rational = Fraction(1, 512)) -> QuantTable:
    path = find_table(b, ell, m, p)
    if path is None:
        raise QuicFLError(
            f"no table for b={b} l={ell} m={m} p={parse_rational(p)}; create one with "
            f"`quicfl solve` and point {TABLE_DIR_ENV} at its directory")
    return read_table(path)


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: str = "quicfl"
    n: int = 1
    d: int = 1 << 16
    b: int = 1
    ell: Optional[int] = None
    p: Fraction = Fraction(1, 512)
    dist: str = "normal"
    trials: int = 1
    seed: int = 0
    m: int = 512
    spikes: int = 1
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "p", parse_rational(self.p))
        if self.ell is None:
            object.__setattr__(self, "ell", default_ell(self.b))
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.dist not in DISTS:
            raise DomainError(f"unknown input distribution {self.dist!r}; choose from {DISTS}")
        if self.n < 1 or self.trials < 1 or self.d < 1:
            raise DomainError("n, d and trials must all be >= 1")


@dataclass
class DmeReport:
    nmse: float
    nmse_stderr: float
    vnmse_per_client: np.ndarray
    chi_estimate: float
    bits_per_coord: float
    outlier_fraction: float
    encode_seconds: float
    decode_seconds: float
    nmse_per_trial: np.ndarray = field(repr=False, default=None)
    vnmse_per_trial: np.ndarray = field(repr=False, default=None)

    @property
    def vnmse(self) -> float:
        return float(np.mean(self.vnmse_per_client))


def generate_inputs(dist: str, d: int, n: int, seed: int, spikes: int = 1) -> np.ndarray:
    rng = np.random.default_rng(prng.derive_seed(seed, 0x1A7))
    if dist == "identical_lognormal":
        return np.tile(rng.lognormal(0.0, 1.0, size=d), (n, 1))
    if dist == "lognormal":
        return rng.lognormal(0.0, 1.0, size=(n, d))
    if dist == "normal":
        return rng.standard_normal((n, d))
    if dist == "sparse_spike":
        if not 1 <= spikes <= d:
            raise DomainError(f"need 1 <= spikes <= d, got {spikes}")
        out = np.zeros((n, d))
        for c in range(n):
            idx = rng.choice(d, size=spikes, replace=False)
            out[c, idx] = rng.standard_normal(spikes)
            # keep a genuine spike even if a draw is exactly zero
            out[c, idx[out[c, idx] == 0.0]] = 1.0
        return out
    raise DomainError(f"unknown input distribution {dist!r}")


def integrate_mse(mse_fn: Callable[[np.ndarray], np.ndarray], T: float,
                  nodes: int = 100_001) -> float:
    """Trapezoid-rule E[mse(Z)] for Z ~ N(0,1) conditioned on [-T, T]."""
    z = np.linspace(-T, T, nodes)
    w = np.exp(-0.5 * z * z)
    w[0] *= 0.5
    w[-1] *= 0.5
    return float(np.sum(w * mse_fn(z)) / np.sum(w))


def estimate_quantizer_mse(table: QuantTable, nodes: int = 100_001,
                           points: Optional[np.ndarray] = None,
                           weights: Optional[np.ndarray] = None) -> float:
    """Per-coordinate MSE of the interpolated encoder on the truncated normal.

    ``points``/``weights`` replace the quadrature rule with an explicit
    discrete distribution.
    """
    if points is not None:
        pts = np.asarray(points, dtype=np.float64)
        wts = np.ones_like(pts) if weights is None else np.asarray(weights, dtype=np.float64)
        return float(np.sum(wts * codecs.sender_moments(pts, table)[1]) / np.sum(wts))
    if nodes < 100_001:
        raise DomainError("use at least 100001 quadrature nodes")
    return integrate_mse(lambda z: codecs.sender_moments(z, table)[1], table.config.T, nodes)


def reference_scheme_mse(nodes: int = 100_001) -> float:
    """Integrated MSE of the one-shared-bit reference scheme."""
    return integrate_mse(lambda z: reference.conditional_moments(z)[1], reference.T_REF, nodes)


def _trial(cfg: ExperimentConfig, table: Optional[QuantTable], trial: int):
    X = generate_inputs(cfg.dist, cfg.d, cfg.n, prng.derive_seed(cfg.seed, trial, 3), cfg.spikes)
    truth = X.mean(axis=0)
    energy = np.einsum("ij,ij->i", X, X)
    client_seeds = [prng.derive_seed(cfg.seed, trial, 1, c) for c in range(cfg.n)]
    private_seeds = [prng.derive_seed(cfg.seed, trial, 2, c) for c in range(cfg.n)]
    global_seed = prng.derive_seed(cfg.seed, trial, 0)

    t0 = time.perf_counter()
    outliers = 0
    coords = 0
    bits = 0.0
    if cfg.scheme in ("quicfl", "quicfl_alg1"):
        algo = "alg1" if cfg.scheme == "quicfl_alg1" else "interpolated"
        msgs = codecs.encode_rows(X, table, global_seed, client_seeds, private_seeds, algorithm=algo)
        t1 = time.perf_counter()
        estimate = codecs.decode_aggregate(msgs, table, global_seed)
        t2 = time.perf_counter()
        per_client = np.stack([codecs.decode_aggregate([m], table, global_seed) for m in msgs])
        outliers = sum(m.outlier_count for m in msgs)
        coords = sum(m.d_pad for m in msgs)
        bits = float(np.mean([m.bits_per_coordinate() for m in msgs]))
    elif cfg.scheme == "none":
        t1 = time.perf_counter()
        per_client = X.copy()
        estimate = per_client.mean(axis=0)
        t2 = time.perf_counter()
        bits = 64.0
    else:
        if cfg.scheme == "bsq":
            msgs = [codecs.bsq_encode(X[c], cfg.p, cfg.b, private_seeds[c]) for c in range(cfg.n)]
            decode = codecs.bsq_decode
            outliers = sum(len(m.outlier_index) for m in msgs)
            coords = cfg.n * cfg.d
        elif cfg.scheme == "qsgd":
            msgs = [codecs.qsgd_encode(X[c], cfg.b, private_seeds[c]) for c in range(cfg.n)]
            decode = codecs.qsgd_decode
        else:
            msgs = [codecs.minmax_hadamard_encode(X[c], cfg.b, client_seeds[c]) for c in range(cfg.n)]
            decode = codecs.minmax_hadamard_decode
        t1 = time.perf_counter()
        per_client = np.stack([decode(m) for m in msgs])
        estimate = per_client.mean(axis=0)
        t2 = time.perf_counter()
        bits = float(np.mean([m.n_bits() / cfg.d for m in msgs]))

    nmse = float(np.sum((estimate - truth) ** 2) / energy.mean())
    vnmse = np.sum((per_client - X) ** 2, axis=1) / energy
    return nmse, vnmse, bits, outliers, coords, t1 - t0, t2 - t1


def run_dme(cfg: ExperimentConfig, table: Optional[QuantTable] = None) -> DmeReport:
    chi = float("nan")
    if cfg.scheme in ("quicfl", "quicfl_alg1"):
        if table is None:
            table = load_default_table(cfg.b, cfg.ell, cfg.m, cfg.p)
        tc = table.config
        if (tc.b, tc.ell, tc.p) != (cfg.b, cfg.ell, cfg.p):
            raise DomainError(f"table is for b={tc.b} l={tc.ell} p={tc.p}, experiment wants "
                              f"b={cfg.b} l={cfg.ell} p={cfg.p}")
        chi = estimate_quantizer_mse(table)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda t: _trial(cfg, table, t), range(cfg.trials)))
    else:
        results = [_trial(cfg, table, t) for t in range(cfg.trials)]

    nmse = np.array([res[0] for res in results])
    vnmse = np.stack([res[1] for res in results])
    outliers = sum(res[3] for res in results)
    coords = sum(res[4] for res in results)
    stderr = float(nmse.std(ddof=1) / np.sqrt(len(nmse))) if len(nmse) > 1 else float("nan")
    return DmeReport(
        nmse=float(nmse.mean()),
        nmse_stderr=stderr,
        vnmse_per_client=vnmse.mean(axis=0),
        chi_estimate=chi,
        bits_per_coord=float(np.mean([res[2] for res in results])),
        outlier_fraction=outliers / coords if coords else 0.0,
        encode_seconds=float(np.median([res[5] for res in results])),
        decode_seconds=float(np.median([res[6] for res in results])),
        nmse_per_trial=nmse,
        vnmse_per_trial=vnmse,
    )


def report_row(cfg: ExperimentConfig, rep: DmeReport) -> dict:
    row = {k: v for k, v in asdict(cfg).items() if k not in ("threads",)}
    row["p"] = f"{cfg.p.numerator}/{cfg.p.denominator}"
    row.update(nmse=rep.nmse, nmse_stderr=rep.nmse_stderr, vnmse=rep.vnmse,
               chi=rep.chi_estimate, bits_per_coord=rep.bits_per_coord,
               outlier_fraction=rep.outlier_fraction, encode_s=rep.encode_seconds,
               decode_s=rep.decode_seconds)
    return row


def _csv_value(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return v


def write_csv(rows: Sequence[dict], path) -> None:
    rows = list(rows)
    if not rows:
        raise DomainError("nothing to write")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row[k]) for k in fields})


@dataclass
class SweepRow:
    b: int
    ell: int
    p: Fraction
    chi: float
    objective: float
    ok: bool = True
    embedded: bool = False
    monotone_ell: bool = True
    monotone_b: bool = True

    def as_dict(self) -> dict:
        return {"b": self.b, "ell": self.ell, "p": f"{self.p.numerator}/{self.p.denominator}",
                "chi": self.chi, "objective": self.objective, "ok": int(self.ok),
                "embedded": int(self.embedded), "monotone_ell": int(self.monotone_ell),
                "monotone_b": int(self.monotone_b)}


def sweep(b_range: Iterable[int], ell_range: Iterable[int], p_range: Iterable[Rational],
          m: int = 64, opts: Optional[SolverOptions] = None, tables: Optional[dict] = None) -> list:
    """Solve and score every (b, l, p) cell.

    Each l after the first restarts from the doubled-row embedding of the
    l-1 table. The solver minimizes the objective on the m quantiles, which
    can leave the integrated chi slightly above that of the embedded l-1
    table; the embedded table is then kept instead (it encodes identically),
    so chi never increases with l. Cells whose solve fails are flagged and
    the sweep continues. Kept tables are stored in ``tables`` when a dict is
    passed.
    """
    opts = opts or SolverOptions(restarts=4)
    ells = sorted(ell_range)
    rows = []
    for p in p_range:
        frac = parse_rational(p)
        for b in sorted(b_range):
            prev = None
            for ell in ells:
                cfg = QuantConfig(b=b, ell=ell, m=m, p=frac)
                chained = prev is not None and ell == prev.config.ell + 1
                warm = [embed_shared_bits(prev.r)] if chained else []
                try:
                    res = solve_table(cfg, opts, initial=warm)
                except (InfeasibleError, QuicFLError) as exc:
                    log.warning("sweep cell b=%d l=%d p=%s failed: %s", b, ell, frac, exc)
                    rows.append(SweepRow(b, ell, frac, float("nan"), float("nan"), ok=False))
                    prev = None
                    continue
                table, obj, chi = res.table, res.objective, estimate_quantizer_mse(res.table)
                embedded = False
                if chained:
                    r2 = embed_shared_bits(prev.r)
                    s2 = s_step(r2, cfg)
                    alt = QuantTable(cfg, r2, s2)
                    chi2 = estimate_quantizer_mse(alt)
                    if chi2 < chi:
                        table, obj, chi, embedded = alt, objective(s2, r2, cfg.quantiles), chi2, True
                prev = table
                if tables is not None:
                    tables[(b, ell, frac)] = table
                rows.append(SweepRow(b, ell, frac, chi, obj, embedded=embedded))
    _flag_monotonicity(rows)
    return rows


def _flag_monotonicity(rows: list, slack: float = 1e-9) -> None:
    by_key = {(r.b, r.ell, r.p): r for r in rows if r.ok}
    for row in rows:
        if not row.ok:
            continue
        below = by_key.get((row.b, row.ell - 1, row.p))
        row.monotone_ell = below is None or row.chi <= below.chi + slack
        fewer = by_key.get((row.b - 1, row.ell, row.p))
        row.monotone_b = fewer is None or row.chi <= fewer.chi + slack


def synthetic_rows(d: int, n_rows: int, seed: int, gap: float = 0.5) -> np.ndarray:
    """Data whose covariance has top eigenvalue 1 and the rest at most ``gap``."""
    rng = np.random.default_rng(prng.derive_seed(seed, 0x9E))
    spectrum = np.concatenate([[1.0], gap * np.linspace(1.0, 0.05, d - 1)])
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (rng.standard_normal((n_rows, d)) * np.sqrt(spectrum)) @ basis.T


@dataclass
class PowerIterationResult:
    errors: np.ndarray
    estimate: np.ndarray
    reference: np.ndarray


def _compressor(cfg: ExperimentConfig, table: Optional[QuantTable]):
    """Return fn(diffs, round) -> average of the decoded diffs."""
    if cfg.scheme == "none" or cfg.b >= 32:
        return lambda diffs, rnd: diffs.mean(axis=0)

    def mean_estimate(diffs, rnd):
        n = diffs.shape[0]
        client_seeds = [prng.derive_seed(cfg.seed, rnd, 1, c) for c in range(n)]
        private_seeds = [prng.derive_seed(cfg.seed, rnd, 2, c) for c in range(n)]
        if cfg.scheme in ("quicfl", "quicfl_alg1"):
            g = prng.derive_seed(cfg.seed, rnd, 0)
            algo = "alg1" if cfg.scheme == "quicfl_alg1" else "interpolated"
            msgs = codecs.encode_rows(diffs, table, g, client_seeds, private_seeds, algorithm=algo)
            return codecs.decode_aggregate(msgs, table, g)
        out = np.zeros(diffs.shape[1])
        for c in range(n):
            if not np.any(diffs[c]):
                continue
            if cfg.scheme == "bsq":
                out += codecs.bsq_decode(codecs.bsq_encode(diffs[c], cfg.p, cfg.b, private_seeds[c]))
            elif cfg.scheme == "qsgd":
                out += codecs.qsgd_decode(codecs.qsgd_encode(diffs[c], cfg.b, private_seeds[c]))
            else:
                out += codecs.minmax_hadamard_decode(
                    codecs.minmax_hadamard_encode(diffs[c], cfg.b, client_seeds[c]))
        return out / n

    return mean_estimate


def power_iteration(cfg: ExperimentConfig, rounds: int = 50, learning_rate: float = 0.1,
                    data: Optional[np.ndarray] = None,
                    table: Optional[QuantTable] = None) -> PowerIterationResult:
    """Distributed power iteration with compressed client updates.

    Clients hold disjoint row blocks of ``data``. Each round every client
    takes one power step on its local covariance from the current global
    estimate, sends the compressed difference, and the server moves the
    estimate by ``learning_rate`` times the averaged difference. Errors are
    measured against the same procedure run without compression.
    """
    if data is None:
        data = synthetic_rows(cfg.d, max(8 * cfg.n, 2 * cfg.d), cfg.seed)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DomainError("data must be a 2-D row matrix")
    if data.shape[1] != cfg.d:
        raise DomainError(f"data has {data.shape[1]} columns, config says d={cfg.d}")
    if data.shape[0] < cfg.n:
        raise DomainError("need at least one row per client")
    if np.linalg.matrix_rank(data) == 0:
        raise DomainError("data matrix has rank 0")
    if cfg.scheme in ("quicfl", "quicfl_alg1") and table is None and cfg.b < 32:
        table = load_default_table(cfg.b, cfg.ell, cfg.m, cfg.p)

    blocks = np.array_split(data, cfg.n)
    covs = [blk.T @ blk for blk in blocks]
    rng = np.random.default_rng(prng.derive_seed(cfg.seed, 0x51))
    v0 = rng.standard_normal(cfg.d)
    v0 /= np.linalg.norm(v0)

    def local_diffs(v):
        diffs = np.empty((cfg.n, cfg.d))
        for c, cov in enumerate(covs):
            w = cov @ v
            nw = np.linalg.norm(w)
            diffs[c] = (w / nw if nw > 0 else v) - v
        return diffs

    compress = _compressor(cfg, table)
    exact = _compressor(replace(cfg, scheme="none"), None)
    v, ref = v0.copy(), v0.copy()
    errors = np.empty(rounds)
    for rnd in range(rounds):
        v = v + learning_rate * compress(local_diffs(v), rnd)
        v /= np.linalg.norm(v)
        ref = ref + learning_rate * exact(local_diffs(ref), rnd)
        ref /= np.linalg.norm(ref)
        errors[rnd] = np.linalg.norm(v - ref)
    return PowerIterationResult(errors=errors, estimate=v, reference=ref)
