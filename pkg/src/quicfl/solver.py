"""Numerical design of unbiased quantization tables.

The joint problem over sender probabilities ``s`` and receiver values ``r``
is bilinear. For fixed ``r`` every quantile decouples into a small linear
program (``s_step``) that is solved exactly by a parametric sweep over its
Lagrange multiplier. For fixed ``s`` the receiver values solve an
equality-constrained least-squares problem (``r_step``). Because ``r_step``
only moves inside the affine set that keeps the current ``s`` unbiased, it
stalls as soon as there are more quantiles than table cells, so each
restart also takes constrained descent steps on the reduced objective
``F(r) = objective(s_step(r), r)``, whose gradient follows from the
multipliers of the s-step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import prng
from .errors import DomainError, InfeasibleError
from .tables import QuantConfig, QuantTable, truncated_normal_ppf, validate_table

log = logging.getLogger(__name__)

UNBIAS_TOL = 1e-6


@dataclass(frozen=True)
class SolverOptions:
    restarts: int = 16
    max_iters: int = 500
    tol: float = 1e-10
    seed: int = 0
    enforce_symmetry: bool = True
    enforce_monotone: bool = True
    enforce_boundary: bool = True
    # SLSQP iterations per reduced-gradient step
    inner_iters: int = 100
    n_jobs: int = 1

    def __post_init__(self):
        if self.restarts < 1:
            raise DomainError("restarts must be >= 1")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not self.tol > 0:
            raise DomainError("tol must be > 0")


@dataclass
class SolverResult:
    table: QuantTable
    objective: float
    max_unbias_violation: float
    iterations: int
    restart_index: int
    history: list = field(default_factory=list)


@dataclass
class RStepResult:
    r: np.ndarray
    rank_deficiency: int


def objective(s: np.ndarray, r: np.ndarray, quantiles: np.ndarray) -> float:
    """(1/m)(1/2^l) * sum over h, q, x of s[h,q,x] * (q - r[h,x])^2."""
    H, m, _ = s.shape
    diff = quantiles[None, :, None] - r[:, None, :]
    return float(np.sum(s * diff * diff) / (m * H))


@dataclass
class _Sweep:
    """The s-step solution for every quantile, in compact form."""

    s: np.ndarray          # (H, m, B)
    t_star: np.ndarray     # (m,) multiplier location q + lambda/2


def _sweep(r: np.ndarray, quantiles: np.ndarray, slack: float = 1e-9) -> _Sweep:
    H, B = r.shape
    m = quantiles.shape[0]
    perm = np.argsort(r, axis=1, kind="stable")
    rs = np.take_along_axis(r, perm, axis=1)
    if B == 1:
        raise DomainError("need at least two messages")
    # move (h, j) shifts row h from its j-th to its (j+1)-th smallest value;
    # the Lagrangian picks, per row, the value nearest to t, so moves fire in
    # order of their midpoints (ties broken by j, then h)
    t = 0.5 * (rs[:, :-1] + rs[:, 1:])
    hh, jj = np.meshgrid(np.arange(H), np.arange(B - 1), indexing="ij")
    order = np.lexsort((hh.ravel(), jj.ravel(), t.ravel()))
    mh = hh.ravel()[order]
    mj = jj.ravel()[order]
    delta = (rs[mh, mj + 1] - rs[mh, mj]) / H
    means = np.concatenate([[rs[:, 0].mean()], rs[:, 0].mean() + np.cumsum(delta)])
    n_moves = delta.shape[0]

    lo_bad = quantiles < means[0] - slack
    hi_bad = quantiles > means[-1] + slack
    if lo_bad.any() or hi_bad.any():
        i = int(np.flatnonzero(lo_bad | hi_bad)[0])
        raise InfeasibleError(
            f"quantile q[{i}]={quantiles[i]!r} is outside the reachable range "
            f"[{means[0]!r}, {means[-1]!r}] of the receiver table")

    k = np.searchsorted(means, quantiles, side="right") - 1
    k = np.clip(k, 0, n_moves - 1)
    dk = delta[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(dk > 0, (quantiles - means[k]) / dk, 0.0)
    f = np.clip(f, 0.0, 1.0)

    rank = np.empty((H, B - 1), dtype=np.int64)
    rank[mh, mj] = np.arange(n_moves)
    # rows' sorted positions after the first k moves
    pos = (rank[None, :, :] < k[:, None, None]).sum(axis=2)          # (m, H)
    s = np.zeros((H, m, B))
    qi = np.arange(m)
    s[np.arange(H)[:, None], qi[None, :], perm[np.arange(H)[:, None], pos.T]] = 1.0
    h_mix = mh[k]
    j_mix = mj[k]
    s[h_mix, qi, perm[h_mix, j_mix]] -= f
    s[h_mix, qi, perm[h_mix, j_mix + 1]] += f
    return _Sweep(s=s, t_star=t[mh[k], mj[k]])


def s_step(r: np.ndarray, cfg: QuantConfig, quantiles: Optional[np.ndarray] = None) -> np.ndarray:
    """Optimal sender probabilities ``s[h, q, x]`` for fixed receiver values.

    Each quantile's linear program has a single coupling (unbiasedness)
    constraint, so its optimum mixes at most one row between two messages.
    """
    r = np.asarray(r, dtype=np.float64)
    q = cfg.quantiles if quantiles is None else np.asarray(quantiles, dtype=np.float64)
    return _sweep(r, q).s


def _reduced(r: np.ndarray, q: np.ndarray):
    sw = _sweep(r, q)
    s = sw.s
    H, m, _ = s.shape
    lam = 2.0 * (sw.t_star - q)
    s0 = s.sum(axis=1)
    s1 = np.einsum("hqx,q->hx", s, q)
    s2 = np.einsum("hqx,q->hx", s, lam)
    grad = (2.0 * (r * s0 - s1) - s2) / (m * H)
    return objective(s, r, q), grad, s


def r_step(s: np.ndarray, cfg: QuantConfig, opts: Optional[SolverOptions] = None,
           quantiles: Optional[np.ndarray] = None) -> RStepResult:
    """Receiver values minimizing the objective for fixed ``s``.

    Solves the KKT system of the quadratic objective under the per-quantile
    unbiasedness equalities (plus boundary and symmetry equalities when
    enabled). Rank-deficient systems get the least-squares minimum-norm
    solution.
    """
    opts = opts or SolverOptions()
    s = np.asarray(s, dtype=np.float64)
    q = cfg.quantiles if quantiles is None else np.asarray(quantiles, dtype=np.float64)
    H, m, B = s.shape
    K = H * B
    w = s.sum(axis=1).ravel() / (m * H)
    lin = np.einsum("hqx,q->hx", s, q).ravel() / (m * H)

    rows = [s.transpose(1, 0, 2).reshape(m, K) / H]
    rhs = [q]
    if opts.enforce_boundary:
        first = np.zeros((2, H, B))
        first[0, :, 0] = 1.0 / H
        first[1, :, B - 1] = 1.0 / H
        rows.append(first.reshape(2, K))
        rhs.append(np.array([-cfg.T, cfg.T]))
    if opts.enforce_symmetry:
        sym = np.zeros((K // 2, K))
        idx = np.arange(K // 2)
        sym[idx, idx] = 1.0
        sym[idx, K - 1 - idx] += 1.0
        rows.append(sym)
        rhs.append(np.zeros(K // 2))
    E = np.vstack(rows)
    e = np.concatenate(rhs)
    n_eq = E.shape[0]
    kkt = np.zeros((K + n_eq, K + n_eq))
    kkt[:K, :K] = np.diag(2.0 * w)
    kkt[:K, K:] = E.T
    kkt[K:, :K] = E
    sol, _, rank, _ = np.linalg.lstsq(kkt, np.concatenate([2.0 * lin, e]), rcond=None)
    r = sol[:K]
    resid = np.max(np.abs(E @ r - e))
    if resid > 1e-9 * max(1.0, cfg.T):
        raise InfeasibleError(f"unbiasedness equalities inconsistent for this s (residual {resid:.3g})")
    return RStepResult(r=r.reshape(H, B), rank_deficiency=int(K + n_eq - rank))


class _Problem:
    """Parametrization and linear constraints shared by all restarts."""

    def __init__(self, cfg: QuantConfig, opts: SolverOptions):
        self.cfg = cfg
        self.opts = opts
        H, B = cfg.n_shared, cfg.n_messages
        self.H, self.B, self.K = H, B, H * B
        self.q = np.asarray(cfg.quantiles)
        K = self.K
        if opts.enforce_symmetry:
            P = np.zeros((K, K // 2))
            P[: K // 2] = np.eye(K // 2)
            P[K // 2:] = -np.eye(K // 2)[::-1]
        else:
            P = np.eye(K)
        self.P = P

        idx = np.arange(K).reshape(H, B)
        pairs = []
        if opts.enforce_monotone:
            pairs += [([idx[h, x + 1]], [idx[h, x]]) for h in range(H) for x in range(B - 1)]
            pairs += [([idx[h + 1, x]], [idx[h, x]]) for h in range(H - 1) for x in range(B)]
            # midpoints of consecutive messages ordered across rows, so the
            # interpolated encoder's sweep matches the exact s-step
            pairs += [([idx[0, x + 1], idx[0, x + 2]], [idx[H - 1, x], idx[H - 1, x + 1]])
                      for x in range(B - 2)]
        A = np.zeros((len(pairs), K))
        for i, (plus, minus) in enumerate(pairs):
            A[i, plus] += 1.0
            A[i, minus] -= 1.0
        Au = A @ P
        if Au.size:
            Au = np.unique(np.round(Au, 12), axis=0)
            Au = Au[np.any(Au != 0, axis=1)]
        self.A_ineq = Au

        eq_rows, eq_rhs = [], []
        if opts.enforce_boundary:
            row = np.zeros(K)
            row[idx[:, 0]] = 1.0 / H
            eq_rows.append(row @ P)
            eq_rhs.append(-cfg.T)
            if not opts.enforce_symmetry:
                row = np.zeros(K)
                row[idx[:, B - 1]] = 1.0 / H
                eq_rows.append(row @ P)
                eq_rhs.append(cfg.T)
        self.A_eq = np.array(eq_rows).reshape(len(eq_rows), -1)
        self.b_eq = np.array(eq_rhs)

    def full(self, u: np.ndarray) -> np.ndarray:
        return (self.P @ u).reshape(self.H, self.B)

    def reduce(self, r: np.ndarray) -> np.ndarray:
        flat = np.asarray(r).ravel()
        return flat[: self.K // 2].copy() if self.opts.enforce_symmetry else flat.copy()

    def fun(self, u):
        val, grad, _ = _reduced(self.full(u), self.q)
        return val, self.P.T @ grad.ravel()

    def violation(self, u) -> float:
        worst = 0.0
        if self.A_ineq.size:
            worst = max(worst, float(-(self.A_ineq @ u).min()))
        if self.A_eq.size:
            worst = max(worst, float(np.abs(self.A_eq @ u - self.b_eq).max()))
        return worst

    def repair(self, r: np.ndarray) -> np.ndarray:
        """Project small constraint slips from the NLP solver back onto the feasible set."""
        r = np.array(r, dtype=np.float64)
        if self.opts.enforce_monotone:
            r = np.maximum.accumulate(r, axis=1)
            r = np.maximum.accumulate(r, axis=0)
        if self.opts.enforce_symmetry:
            r = 0.5 * (r - r[::-1, ::-1])
        if self.opts.enforce_boundary:
            T = self.cfg.T
            r[:, 0] += -T - r[:, 0].mean()
            r[:, -1] += T - r[:, -1].mean()
        return r

    def feasible(self, r: np.ndarray, tol: float = 1e-12) -> bool:
        u = self.reduce(r)
        if self.opts.enforce_symmetry and np.max(np.abs(self.full(u) - r)) > 1e-12:
            return False
        return self.violation(u) <= tol * max(1.0, self.cfg.T)

    def initial(self, seed: int) -> np.ndarray:
        """Sorted, jittered truncated-normal quantiles laid out message-major."""
        K, H, B, T = self.K, self.H, self.B, self.cfg.T
        jitter = prng.uniform(seed, np.arange(K), prng.STREAM_PRIVATE) - 0.5
        probs = np.clip((np.arange(K) + 0.5 + 0.9 * jitter) / K, 0.0, 1.0)
        v = np.sort([truncated_normal_ppf(float(u), T, width=1e-9) for u in probs])
        if self.opts.enforce_symmetry:
            v = 0.5 * (v - v[::-1])
        r = v.reshape(B, H).T.copy()
        if self.opts.enforce_boundary:
            r[:, 0] += -T - r[:, 0].mean()
            r[:, -1] += T - r[:, -1].mean()
        return r


def _run_restart(problem: _Problem, r0: np.ndarray, index: int) -> Optional[SolverResult]:
    opts = problem.opts
    cfg = problem.cfg
    bounds_ok = problem.feasible(r0, tol=1e-9)
    if not bounds_ok:
        r0 = problem.repair(r0)
    r = r0
    obj, _, s = _reduced(r, problem.q)
    history = [obj]
    constraints = []
    if problem.A_ineq.size:
        A = problem.A_ineq
        constraints.append({"type": "ineq", "fun": lambda u: A @ u, "jac": lambda u: A})
    if problem.A_eq.size:
        Ae, be = problem.A_eq, problem.b_eq
        constraints.append({"type": "eq", "fun": lambda u: Ae @ u - be, "jac": lambda u: Ae})

    iterations = 0
    for iterations in range(1, opts.max_iters + 1):
        improved = False
        try:
            cand = r_step(s, cfg, opts).r
        except InfeasibleError:
            cand = None
        if cand is not None and problem.feasible(cand, tol=1e-10):
            val, _, s_new = _reduced(cand, problem.q)
            if val < obj - opts.tol:
                r, obj, s = cand, val, s_new
                improved = True
        if not improved:
            res = minimize(problem.fun, problem.reduce(r), jac=True, method="SLSQP",
                           constraints=constraints,
                           options={"maxiter": opts.inner_iters, "ftol": 1e-14})
            cand = problem.full(res.x)
            if not problem.feasible(cand, tol=1e-10):
                cand = problem.repair(cand)
            try:
                val, _, s_new = _reduced(cand, problem.q)
            except InfeasibleError:
                val = np.inf
            if val < obj - opts.tol:
                r, obj, s = cand, val, s_new
                improved = True
        if not improved:
            break
        history.append(obj)

    table = QuantTable(cfg, r, s)
    unbias = validate_table(table).unbiasedness
    return SolverResult(table=table, objective=obj, max_unbias_violation=unbias,
                        iterations=iterations, restart_index=index, history=history)


def embed_shared_bits(r: np.ndarray) -> np.ndarray:
    """An (l+1)-bit receiver table equivalent to the given l-bit one (rows doubled)."""
    return np.repeat(np.asarray(r), 2, axis=0)


def solve_table(cfg: QuantConfig, opts: Optional[SolverOptions] = None,
                initial: Sequence[np.ndarray] = ()) -> SolverResult:
    """Best feasible table over all restarts; ``initial`` adds warm-start restarts first."""
    opts = opts or SolverOptions()
    problem = _Problem(cfg, opts)
    starts = [np.asarray(r0, dtype=np.float64) for r0 in initial]
    for r0 in starts:
        if r0.shape != (problem.H, problem.B):
            raise DomainError(f"warm start has shape {r0.shape}, expected {(problem.H, problem.B)}")
    starts += [problem.initial(prng.derive_seed(opts.seed, i)) for i in range(opts.restarts)]

    def run(i):
        try:
            return _run_restart(problem, starts[i], i)
        except InfeasibleError as exc:
            log.debug("restart %d failed: %s", i, exc)
            return None

    if opts.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=opts.n_jobs) as pool:
            results = list(pool.map(run, range(len(starts))))
    else:
        results = [run(i) for i in range(len(starts))]

    done = [res for res in results if res is not None]
    feasible = [res for res in done if res.max_unbias_violation <= UNBIAS_TOL]
    if not feasible:
        best = min(done, key=lambda res: res.max_unbias_violation, default=None)
        raise InfeasibleError(f"no restart reached feasibility for {cfg}", best=best)
    best = min(feasible, key=lambda res: (res.objective, res.restart_index))
    log.info("solved %s: objective %.6g (restart %d)", cfg, best.objective, best.restart_index)
    return best
