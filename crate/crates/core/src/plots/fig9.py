"""Entity counts per grid, strategy and step (complexity.csv)."""
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("complexity.csv")))
series = {}
for r in rows:
    grid, strategy, step = r["label"].split("/")
    series.setdefault((grid, strategy), []).append((int(step[4:]), r))
grids = sorted({g for g, _ in series})
cols = ["n_vertices", "n_edges", "n_faces", "n_elements"]
fig, axes = plt.subplots(len(grids), len(cols), figsize=(16, 3 * len(grids)), squeeze=False)
for gi, grid in enumerate(grids):
    for (g, strategy), pts in series.items():
        if g != grid:
            continue
        for ci, col in enumerate(cols):
            axes[gi][ci].semilogy([p[0] for p in pts], [int(p[1][col]) for p in pts], "o-", label=strategy)
            axes[gi][ci].set_title(f"{grid}: {col}")
    axes[gi][0].legend()
fig.tight_layout()
fig.savefig("fig9.png", dpi=150)
