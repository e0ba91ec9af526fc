"""Local errors of one step from the canonical 1D BZ state, for every scheme.

Writes ``order_sweep.csv`` (or the path given on the command line) and prints
the error of each component next to the embedded estimate.
"""

import sys

import numpy as np

from mrirk import grid as mr
from mrirk.models import bz_model
from mrirk.runner import canonical_path, order_sweep, write_sweep_csv

grid, names = mr.load_csv(canonical_path("bz1d"))
model = bz_model(1)
dts = list(2.0 ** -np.arange(9, 18))
rows = order_sweep(grid, model, 0.5, dts, ["euler", "sdirk2", "sdirk3", "sdirk4", "radau3", "radau5"])
path = write_sweep_csv(rows, sys.argv[1] if len(sys.argv) > 1 else "order_sweep.csv", names)
for r in rows:
    print(f"{r[0]:7s} dt={r[1]:.3e}  " + "  ".join(f"{v:.3e}" for v in r[2:]))
print("written", path)
