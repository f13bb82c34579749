"""
Throughput, overhead and boot cost in a few lines
=================================================

"""

import numpy as np

from mtcd import bench
from mtcd.provisioner import BootModel, amortized_startup_fraction

# 32768 sleep-0 tasks finishing in 30.31 s
print("overhead per task (ms):", bench.per_task_overhead(30.31, 32768))

# keeping 160K cores busy with one-minute tasks
print("required tasks/s:", bench.required_throughput(163840, 60))

# boot time grows with the log of the allocation size
model = BootModel()
cores = 256 * 2 ** np.arange(0, 10)
boot = np.array([model.boot_time(int(c)) for c in cores])
for c, b in zip(cores, boot):
    print(f"{c:7d} cores  boot {b:7.1f} s")

# how much of a run is boot, as the run gets longer
for run_s in (60, 600, 3600, 36000):
    print(run_s, round(amortized_startup_fraction(model.boot_time(4096), run_s), 4))
