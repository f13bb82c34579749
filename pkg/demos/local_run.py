"""
Running tasks on this machine
=============================

Start one dispatcher and eight single-slot executors, push a small
workload through the client, then look at what came back.
"""

import numpy as np

from mtcd.bench import LocalStack, efficiency
from mtcd.client import sleep_tasks
from mtcd.protocol import TaskDescriptor

with LocalStack(8) as stack:
    with stack.client() as client:
        tasks = sleep_tasks(40, 0.1, prefix="nap") + [
            TaskDescriptor("hello", "/bin/echo", ["hello"], capture_stdout=True),
            TaskDescriptor("oops", "/bin/false"),
        ]
        results, summary = client.run(tasks, timeout_s=60)

print(summary.counts)
print("makespan %.2f s, %.1f tasks/s" % (summary.makespan_s, summary.throughput))

# per-task latency from dispatch to finish
naps = [r for r in results if r.task_id.startswith("nap")]
lat = np.array([r.t_finished - r.t_dispatched for r in naps])
print("dispatch->finish ms: p50 %.1f  p99 %.1f" % tuple(np.percentile(lat, [50, 99])))

# five waves of 0.1 s on 8 slots
span = (max(r.t_finished for r in naps) - min(r.t_dispatched for r in naps)) / 1000
print("efficiency", round(efficiency(8, 0.1, len(naps), span).efficiency, 3))
