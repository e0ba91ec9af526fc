"""Advance the 2D BZ spiral from the t = 2 snapshot and save a picture of species b.

Needs matplotlib, which the package itself does not depend on.
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from mrirk import grid as mr
from mrirk.control import StepControlConfig
from mrirk.runner import RunConfig, run

t_end = float(sys.argv[1]) if len(sys.argv) > 1 else 2.05
cfg = RunConfig(model="bz2d", max_level=8, roots=(1, 1), eta_mr=1e-3, scheme="sdirk4",
                control=StepControlConfig(eta_rk=1e-3, dt0=1e-4), t_start=2.0, t_end=t_end, initial="canonical")
res = run(cfg)
s = res.stats.summary()
print(f"t={res.t:.4g} steps={s['steps']} leaves={res.grid.n_leaves} "
      f"compression={mr.compression_ratio(res.grid):.1f}% wall={s['wall_time']:.1f}s")

(x, y), values = mr.resample(res.grid)
fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4.5))
ax0.pcolormesh(x, y, values[1], shading="auto")
ax0.set_title("b")
ax1.scatter(*res.grid.leaf_centres.T, s=0.2, c=res.grid.leaf_level, cmap="viridis")
ax1.set_title("leaf centres by level")
for ax in (ax0, ax1):
    ax.set_aspect("equal")
fig.savefig("bz2d_spiral.png", dpi=120)
print("written bz2d_spiral.png")
