"""
Efficiency versus task length, on a virtual clock
=================================================

The simulator drives the real dispatcher core with executors that take
exactly the task length plus a fixed overhead, so the curves come out
deterministic.
"""

import numpy as np

from mtcd import bench

lengths = [0.25, 0.5, 1, 2, 4, 8]
slots = [64, 256, 1024]

# with no overhead every point is ideal
print([p.efficiency for p in bench.bench_efficiency_sweep(64, lengths, mode="simulated")])

# 20 ms per task shows the familiar t / (t + o) shape
table = np.array([[p.efficiency for p in
                   bench.bench_efficiency_sweep(P, lengths, mode="simulated", overhead_s=0.02)]
                  for P in slots])
print("      " + " ".join(f"{t:>6g}" for t in lengths))
for P, row in zip(slots, table):
    print(f"{P:5d} " + " ".join(f"{e:6.3f}" for e in row))
print("model " + " ".join(f"{bench.efficiency_model(t, 0.02):6.3f}" for t in lengths))

# a slow dispatcher caps the rate instead: 2 ms per dispatch, 1024 slots
pts = bench.bench_efficiency_sweep(1024, lengths, mode="simulated", dispatch_cost_s=0.002)
print([round(p.efficiency, 3) for p in pts])
