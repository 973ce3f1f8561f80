"""Bar chart of box-shaped children per grid and strategy (structure.csv).

The refined meshes are in the *.vtk files next to this script.
"""
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("structure.csv")))
grids = sorted({r["grid"] for r in rows}, key=[r["grid"] for r in rows].index)
strategies = sorted({r["strategy"] for r in rows}, key=[r["strategy"] for r in rows].index)
fig, ax = plt.subplots()
width = 0.8 / len(strategies)
for k, s in enumerate(strategies):
    share = [
        100 * int(r["boxes"]) / int(r["n_elements"])
        for g in grids
        for r in rows
        if r["grid"] == g and r["strategy"] == s
    ]
    ax.bar([i + k * width for i in range(len(grids))], share, width, label=s)
ax.set_xticks([i + 0.4 - width / 2 for i in range(len(grids))], grids)
ax.set_ylabel("axis-aligned boxes (%)")
ax.legend()
fig.savefig("fig7.png", dpi=150)
