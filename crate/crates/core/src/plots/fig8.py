"""Histograms of uniformity factor and circle ratio per grid and strategy."""
import csv
import glob
import matplotlib.pyplot as plt

files = sorted(glob.glob("*_quality_hist.csv"))
grids = sorted({f.split("_")[0] for f in files})
fig, axes = plt.subplots(len(grids), 2, figsize=(10, 4 * len(grids)), squeeze=False)
for gi, grid in enumerate(grids):
    for f in files:
        if not f.startswith(grid + "_"):
            continue
        strategy = f[len(grid) + 1 : -len("_quality_hist.csv")]
        rows = list(csv.DictReader(open(f)))
        x = [float(r["bin_start"]) for r in rows]
        for ci, col in enumerate(["uf_percent", "cr_percent"]):
            axes[gi][ci].step(x, [float(r[col]) for r in rows], where="post", label=strategy)
    for ci, name in enumerate(["Uniformity Factor", "Circle Ratio"]):
        axes[gi][ci].set_title(f"{grid}: {name}")
        axes[gi][ci].set_ylabel("% of elements")
        axes[gi][ci].legend()
fig.tight_layout()
fig.savefig("fig8.png", dpi=150)
