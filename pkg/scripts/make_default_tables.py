"""Regenerate the tables shipped in src/quicfl/data."""

import sys
import time
from pathlib import Path

from quicfl.solver import SolverOptions, solve_table
from quicfl.tables import QuantConfig, default_table_name, write_table

OUT = Path(__file__).resolve().parents[1] / "src" / "quicfl" / "data"
CELLS = [(1, 1), (1, 6), (2, 5), (3, 4), (4, 4)]

if __name__ == "__main__":
    cells = CELLS
    if len(sys.argv) > 1:
        cells = [tuple(int(v) for v in a.split(",")) for a in sys.argv[1:]]
    OUT.mkdir(exist_ok=True)
    for b, ell in cells:
        t0 = time.perf_counter()
        cfg = QuantConfig(b=b, ell=ell, m=512)
        res = solve_table(cfg, SolverOptions(restarts=4, seed=0, n_jobs=4))
        path = OUT / default_table_name(b, ell)
        write_table(res.table, path)
        print(f"b={b} l={ell} objective={res.objective:.6g} "
              f"unbias={res.max_unbias_violation:.2g} {time.perf_counter() - t0:.0f}s -> {path.name}",
              flush=True)
