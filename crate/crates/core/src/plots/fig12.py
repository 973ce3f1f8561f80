"""Element density near and far from the boundary layer (adaptive.csv).

The final meshes are in the cubes_*.vtk files next to this script.
"""
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("adaptive.csv")))
fig, ax = plt.subplots()
for s in dict.fromkeys(r["strategy"] for r in rows):
    pts = [r for r in rows if r["strategy"] == s]
    steps = [int(r["step"]) for r in pts]
    ax.plot(steps, [float(r["density_near"]) for r in pts], "o-", label=f"{s}, 0 < x < 0.25")
    ax.plot(steps, [float(r["density_far"]) for r in pts], "s--", label=f"{s}, 0.75 < x < 1")
ax.set_xlabel("step")
ax.set_ylabel("elements per unit volume")
ax.set_yscale("log")
ax.legend()
fig.savefig("fig12.png", dpi=150)
