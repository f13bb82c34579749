"""Metrics and desk-scale microbenchmarks.

Metric helpers are plain functions of measured quantities.  The benchmark
drivers run either against a local stack (dispatcher and executor
processes on this machine) or against the virtual-clock simulator.
"""

import argparse
import csv
import hashlib
import itertools
import json
import logging
import math
import multiprocessing
import os
import platform
import queue
import shutil
import subprocess
import sys
import tempfile
import threading
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np

from . import protocol as P
from .client import Client, makespan_s, sleep_tasks
from .dispatcher import DispatcherCore, DispatcherProcess
from .executor import BLOCK_BYTES
from .protocol import Kind, TaskResult, TaskStatus
from .provisioner import Provisioner, simulate_workload

log = logging.getLogger(__name__)

# Published task rates of batch schedulers, tasks/s, for report context only.
LRM_THROUGHPUT = {
    "PBS v2.1.8": 0.45,
    "Condor v6.7.2": 0.49,
    "Condor J2": 22.0,
    "Cobalt": 0.037,
    "Cobalt HTC-mode": 0.29,
}


def throughput(completed_tasks, elapsed_s) -> float:
    if elapsed_s <= 0:
        raise ValueError("elapsed_s must be positive")
    return completed_tasks / elapsed_s


def per_task_overhead(makespan_s, num_tasks) -> float:
    """Milliseconds of makespan per task."""
    if num_tasks <= 0:
        raise ValueError("num_tasks must be positive")
    return makespan_s * 1000.0 / num_tasks


def speedup(total_busy_cpu_s, makespan_s) -> float:
    if makespan_s <= 0:
        raise ValueError("makespan_s must be positive")
    return total_busy_cpu_s / makespan_s


def required_throughput(processors, task_length_s) -> float:
    """Dispatch rate needed to keep every processor busy with tasks of this length."""
    if processors <= 0 or task_length_s <= 0:
        raise ValueError("processors and task length must be positive")
    return processors / task_length_s


@dataclass
class EfficiencyPoint:
    processors: int
    task_length_s: float
    num_tasks: int
    ideal_makespan_s: float
    actual_makespan_s: float
    efficiency: float


def efficiency(processors, task_length_s, num_tasks, actual_makespan_s) -> EfficiencyPoint:
    if processors <= 0 or num_tasks <= 0 or actual_makespan_s <= 0 or task_length_s < 0:
        raise ValueError("efficiency needs positive processors, tasks and makespan")
    ideal = math.ceil(num_tasks / processors) * task_length_s
    eff = ideal / actual_makespan_s
    if eff > 1:
        warnings.warn(f"efficiency {float(eff):.4f} > 1 (timer jitter); clamped to 1.0")
        eff = 1.0
    return EfficiencyPoint(processors, task_length_s, num_tasks, ideal, actual_makespan_s, eff)


def efficiency_model(task_length_s, overhead_s) -> float:
    """Expected efficiency when each task carries a fixed overhead."""
    return task_length_s / (task_length_s + overhead_s)


def sustained_throughput(finish_times_ms, fraction=0.8) -> float:
    """Completion rate over the middle ``fraction`` of completions."""
    t = np.sort(np.asarray(finish_times_ms, dtype=float))
    n = len(t)
    if n < 2:
        return 0.0
    lo = int(round(n * (1 - fraction) / 2))
    hi = n - 1 - lo
    if hi <= lo:
        lo, hi = 0, n - 1
    span = (t[hi] - t[lo]) / 1000.0
    return float((hi - lo) / span) if span > 0 else float("inf")


def machine_spec() -> Dict[str, str]:
    spec = {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpus": str(os.cpu_count()),
    }
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    spec["cpu_model"] = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return spec


@dataclass
class BenchReport:
    benchmark: str
    params: Dict[str, object]
    samples: List[float] = field(default_factory=list)  # milliseconds
    derived: Dict[str, float] = field(default_factory=dict)
    series: Dict[str, List[tuple]] = field(default_factory=dict)
    partial: bool = False
    machine: Dict[str, str] = field(default_factory=machine_spec)

    @property
    def aggregates(self) -> Dict[str, float]:
        if not self.samples:
            return {}
        a = np.asarray(self.samples, dtype=float)
        p50, p90, p99 = np.percentile(a, [50, 90, 99])
        return {"mean": float(a.mean()), "stddev": float(a.std()), "min": float(a.min()),
                "max": float(a.max()), "p50": float(p50), "p90": float(p90), "p99": float(p99)}

    @property
    def param_set_id(self) -> str:
        text = json.dumps(self.params, sort_keys=True, default=str)
        return hashlib.sha1(text.encode()).hexdigest()[:10]


def _fmt(x):
    return repr(float(x))


def emit_report(report: BenchReport, out_dir, format="csv") -> List[str]:
    """Write ``report`` under ``out_dir``; returns the written paths.

    ``csv`` writes ``<benchmark>_samples.csv`` and ``<benchmark>_aggregates.csv``;
    ``plotdata`` writes one whitespace-separated ``x y`` file per series.
    Output depends only on the report, so re-emitting is byte-identical.
    """
    os.makedirs(out_dir, exist_ok=True)
    machine = "# machine: " + "; ".join(f"{k}={v}" for k, v in sorted(report.machine.items()))
    pid = report.param_set_id
    written = []
    if format == "csv":
        rows = [(i, v) for i, v in enumerate(report.samples)]
        path = os.path.join(out_dir, f"{report.benchmark}_samples.csv")
        with open(path, "w", newline="") as f:
            f.write(machine + "\n")
            f.write("# params: " + json.dumps(report.params, sort_keys=True, default=str) + "\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["benchmark", "param_set_id", "sample_idx", "value_ms"])
            for i, v in rows:
                w.writerow([report.benchmark, pid, i, _fmt(v)])
        written.append(path)
        path = os.path.join(out_dir, f"{report.benchmark}_aggregates.csv")
        with open(path, "w", newline="") as f:
            f.write(machine + "\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["benchmark", "param_set_id", "metric", "value"])
            metrics = dict(report.aggregates)
            metrics.update(report.derived)
            metrics["partial"] = float(report.partial)
            for k in sorted(metrics):
                w.writerow([report.benchmark, pid, k, _fmt(metrics[k])])
        written.append(path)
    elif format == "plotdata":
        for name in sorted(report.series):
            path = os.path.join(out_dir, f"{report.benchmark}_{name}.dat")
            with open(path, "w") as f:
                f.write(machine + "\n")
                f.write(f"# series {name}: x y\n")
                for x, y in report.series[name]:
                    f.write(f"{_fmt(x)} {_fmt(y)}\n")
            written.append(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    return written


# ---------------------------------------------------------------------------
# local stack


class LocalStack:
    """Dispatchers plus single-slot executor processes on this machine."""

    def __init__(self, slots=64, dispatchers=1, cache_root=None, heartbeat_ms=5000):
        if slots % dispatchers:
            raise ValueError("slots must divide evenly among dispatchers")
        self.slots = slots
        self.n_dispatchers = dispatchers
        self.heartbeat_ms = heartbeat_ms
        base = "/dev/shm" if os.path.isdir("/dev/shm") else None
        self._own_root = cache_root is None
        self.cache_root = cache_root or tempfile.mkdtemp(prefix="mtcd-stack-", dir=base)
        self.dispatchers: List[DispatcherProcess] = []
        self.allocations = []
        self.provisioner = Provisioner(scale_factor=1.0, cache_root=self.cache_root)

    @property
    def addresses(self):
        return [d.address for d in self.dispatchers]

    def start(self):
        try:
            per = self.slots // self.n_dispatchers
            for _ in range(self.n_dispatchers):
                d = DispatcherProcess(heartbeat_ms=self.heartbeat_ms)
                self.dispatchers.append(d)
                self.allocations.append(self.provisioner.request_allocation(
                    1, cores_per_pset=per, duration_s=600, mode="real", dispatcher=d.address))
        except BaseException:
            self.stop()
            raise
        return self

    def client(self, **kwargs) -> Client:
        return Client(self.addresses, **kwargs)

    def stop(self):
        for a in self.allocations:
            self.provisioner.release(a, timeout_s=5)
        for d in self.dispatchers:
            d.stop()
        self.allocations, self.dispatchers = [], []
        if self._own_root:
            shutil.rmtree(self.cache_root, ignore_errors=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


_run_ids = itertools.count(1)


def run_sleep_workload(stack: LocalStack, num_tasks, seconds=0, prefix="t", timeout_s=None):
    """Run sleep tasks on ``stack``; task ids are unique across calls."""
    prefix = f"{prefix}{next(_run_ids)}-"
    with stack.client() as client:
        results, summary = client.run(sleep_tasks(num_tasks, seconds, prefix=prefix),
                                      timeout_s=timeout_s)
    return results, summary


def _simulated_ceiling(slots, num_tasks):
    """Tasks/s the dispatcher core plus codec sustain with instantaneous executors."""
    core = DispatcherCore()
    decoder = P.FrameDecoder()

    class Conn:
        def __init__(self):
            self.inbox = []
            self.executor_id = None

        def send(self, msg):
            self.inbox.append(P.encode(msg))

    conns = []
    for k in range(slots):
        c = Conn()
        ack = core.register_executor({"version": P.PROTOCOL_VERSION, "slots": 1,
                                      "address": f"ceiling/{k}"}, c, 0.0)
        c.executor_id = ack.payload["executor_id"]
        conns.append(c)
    owner = Conn()
    tasks = [t.to_dict() for t in sleep_tasks(num_tasks, 0)]
    clock = time.perf_counter
    t0 = clock()
    for frame in [P.encode(P.Message(Kind.SUBMIT, {"tasks": tasks}))]:
        (msg,) = decoder.feed(frame)
        core.submit(msg.payload["tasks"], owner, (clock() - t0) * 1000)
    core.schedule_step((clock() - t0) * 1000)
    finish = []
    while True:
        busy = False
        for c in conns:
            if not c.inbox:
                continue
            busy = True
            frames, c.inbox = c.inbox, []
            for frame in frames:
                (msg,) = decoder.feed(frame)
                now = (clock() - t0) * 1000
                res = TaskResult(msg.payload["task"]["task_id"], 0, TaskStatus.SUCCESS,
                                 c.executor_id, msg.payload["t_submitted"],
                                 msg.payload["t_dispatched"], now, now)
                (back,) = decoder.feed(P.encode(P.task_result(res)))
                core.handle_result(TaskResult.from_dict(back.payload["result"]), now)
                finish.append(now)
            core.schedule_step((clock() - t0) * 1000)
        if not busy:
            break
    owner.inbox.clear()
    return finish


def bench_dispatch_throughput(slots=64, num_tasks=50_000, dispatchers=1, mode="local",
                              stack: Optional[LocalStack] = None, timeout_s=None) -> BenchReport:
    """Sleep-0 dispatch throughput; ``derived['sustained_tps']`` covers the middle 80%."""
    params = {"slots": slots, "num_tasks": num_tasks, "dispatchers": dispatchers, "mode": mode}
    report = BenchReport("throughput", params)
    if mode == "simulated":
        finish = _simulated_ceiling(slots, num_tasks)
        span = (max(finish) - min(finish)) / 1000.0 if finish else 0.0
        report.derived.update({
            "completed": float(len(finish)),
            "sustained_tps": sustained_throughput(finish),
            "dispatcher_ceiling_tps": len(finish) / span if span > 0 else float("inf"),
        })
        report.partial = len(finish) != num_tasks
        return report
    own = stack is None
    if own:
        stack = LocalStack(slots, dispatchers).start()
    try:
        results, summary = run_sleep_workload(stack, num_tasks, 0, timeout_s=timeout_s)
    finally:
        if own:
            stack.stop()
    ok = [r for r in results if r.status is TaskStatus.SUCCESS]
    report.samples = [r.t_finished - r.t_dispatched for r in ok]
    span = makespan_s(ok) if ok else 0.0
    report.partial = not summary.complete or len(ok) != num_tasks
    report.derived.update({
        "completed": float(len(ok)),
        "makespan_s": span,
        "throughput_tps": throughput(len(ok), span) if span > 0 else 0.0,
        "sustained_tps": sustained_throughput([r.t_finished for r in ok]),
        "per_task_overhead_ms": per_task_overhead(span, len(ok)) if ok else float("nan"),
    })
    for name, rate in LRM_THROUGHPUT.items():
        report.derived[f"lrm_{name.replace(' ', '_')}_tps"] = rate
    return report


def measure_overhead(stack: LocalStack, num_tasks=None) -> float:
    """Per-task overhead in seconds from a sleep-0 run: makespan / tasks."""
    num_tasks = num_tasks or 10 * stack.slots
    results, summary = run_sleep_workload(stack, num_tasks, 0, prefix="o")
    ok = [r for r in results if r.status is TaskStatus.SUCCESS]
    if len(ok) != num_tasks:
        raise RuntimeError(f"overhead run incomplete: {summary.counts}")
    return per_task_overhead(makespan_s(ok), num_tasks) / 1000.0


def bench_efficiency_sweep(slots, task_lengths, tasks_per_point=None, mode="local",
                           stack: Optional[LocalStack] = None, overhead_s=0,
                           dispatch_cost_s=0) -> List[EfficiencyPoint]:
    """Efficiency for each task length; zero-length points are skipped with a warning."""
    tasks_per_point = tasks_per_point or 10 * slots
    points = []
    own = mode == "local" and stack is None
    if own:
        stack = LocalStack(slots).start()
    try:
        for t in task_lengths:
            if t <= 0:
                warnings.warn("task length 0 has ideal makespan 0; point skipped")
                continue
            if mode == "simulated":
                run = simulate_workload([t] * tasks_per_point, slots, task_overhead_s=overhead_s,
                                        dispatch_cost_s=dispatch_cost_s)
                ideal = math.ceil(tasks_per_point / slots) * Fraction(t)
                eff = ideal / run.makespan_s
                points.append(EfficiencyPoint(slots, t, tasks_per_point, float(ideal),
                                              float(run.makespan_s), float(min(eff, 1))))
                continue
            results, summary = run_sleep_workload(stack, tasks_per_point, t, prefix="e")
            ok = [r for r in results if r.status is TaskStatus.SUCCESS]
            if len(ok) != tasks_per_point:
                raise RuntimeError(f"efficiency run for t={t} incomplete: {summary.counts}")
            points.append(efficiency(slots, t, tasks_per_point, makespan_s(ok)))
    finally:
        if own:
            stack.stop()
    return points


def efficiency_report(points: List[EfficiencyPoint], name="efficiency") -> BenchReport:
    report = BenchReport(name, {"points": [(p.processors, p.task_length_s, p.num_tasks)
                                           for p in points]})
    for p in points:
        report.series.setdefault(f"t{p.task_length_s:g}", []).append((p.processors, p.efficiency))
        report.derived[f"efficiency_t{p.task_length_s:g}_P{p.processors}"] = p.efficiency
    return report


# ---------------------------------------------------------------------------
# filesystem microbenchmarks

FS_OPS = ("create_file", "create_dir", "invoke_script", "noop_task")
SCRIPT = "#!/bin/sh\nexit 0\n"


def _fs_worker(op, k, workdir, script, n_ops, barrier, out):
    lat = []
    errors = 0
    barrier.wait()
    for i in range(n_ops):
        path = os.path.join(workdir, f"{op}-{k}-{i}")
        t0 = time.perf_counter()
        try:
            if op == "create_file":
                os.close(os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644))
            elif op == "create_dir":
                os.mkdir(path)
            elif op == "invoke_script":
                subprocess.run([script], cwd=workdir, check=True)
            elif op == "noop_task":
                subprocess.run(["/bin/sleep", "0"], check=True)
        except (OSError, subprocess.CalledProcessError):
            errors += 1
            continue
        lat.append((time.perf_counter() - t0) * 1000.0)
    out.put((k, lat, errors))


def _run_workers(target, args_for, concurrency, use_processes):
    if use_processes:
        ctx = multiprocessing.get_context("fork")
        barrier, out = ctx.Barrier(concurrency), ctx.Queue()
        workers = [ctx.Process(target=target, args=args_for(k) + (barrier, out))
                   for k in range(concurrency)]
    else:
        barrier, out = threading.Barrier(concurrency), queue.Queue()
        workers = [threading.Thread(target=target, args=args_for(k) + (barrier, out))
                   for k in range(concurrency)]
    for w in workers:
        w.start()
    collected = [out.get() for _ in workers]
    for w in workers:
        w.join()
    return sorted(collected, key=lambda c: c[0])


def bench_fsops(op, concurrency, layout, target_dir, ops_per_worker=1,
                use_processes=True) -> BenchReport:
    """Concurrent metadata operations; samples are per-op latencies in ms."""
    if op not in FS_OPS:
        raise ValueError(f"op must be one of {FS_OPS}")
    if layout not in ("single_dir", "many_dirs"):
        raise ValueError("layout must be single_dir or many_dirs")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    root = tempfile.mkdtemp(prefix=f"fsops-{op}-{layout}-", dir=target_dir)
    script = os.path.join(root, "task.sh")
    with open(script, "w") as f:
        f.write(SCRIPT)
    os.chmod(script, 0o755)
    if layout == "single_dir":
        shared = os.path.join(root, "shared")
        os.mkdir(shared)
        dirs = [shared] * concurrency
    else:
        dirs = [os.path.join(root, f"w{k}") for k in range(concurrency)]
        for d in dirs:
            os.mkdir(d)
    try:
        collected = _run_workers(_fs_worker, lambda k: (op, k, dirs[k], script, ops_per_worker),
                                 concurrency, use_processes)
    finally:
        shutil.rmtree(root, ignore_errors=True)
    report = BenchReport(f"fsops_{op}_{layout}", {"op": op, "concurrency": concurrency,
                                                  "layout": layout,
                                                  "ops_per_worker": ops_per_worker,
                                                  "processes": use_processes})
    errors = 0
    for _, lat, err in collected:
        report.samples.extend(lat)
        errors += err
    report.derived["errors"] = float(errors)
    report.partial = errors > 0
    if report.samples:
        report.derived["aggregate_ops_per_s"] = aggregate_rate(concurrency,
                                                               float(np.mean(report.samples)) / 1000)
    return report


def aggregate_rate(concurrent_ops, seconds_per_op) -> float:
    """Operations per second when ``concurrent_ops`` ops each take ``seconds_per_op``."""
    return concurrent_ops / seconds_per_op


def _rw_worker(mode, k, src, dst, block_bytes, barrier, out):
    buf = bytearray(block_bytes)
    barrier.wait()
    t0 = time.perf_counter()
    n = 0
    try:
        with open(src, "rb", buffering=0) as fin:
            if mode == "read":
                while True:
                    r = fin.readinto(buf)
                    if not r:
                        break
                    n += r
            else:
                view = memoryview(buf)
                with open(dst, "wb", buffering=0) as fout:
                    while True:
                        r = fin.readinto(buf)
                        if not r:
                            break
                        fout.write(view[:r])
                        n += r
        err = 0
    except OSError:
        err = 1
    out.put((k, (t0, time.perf_counter(), n), err))


def bench_readwrite(file_size_bytes, concurrency, mode, target_dir, block_bytes=BLOCK_BYTES,
                    use_processes=True) -> BenchReport:
    """Each worker reads (or reads and writes) its own file; aggregate MB/s in ``derived``."""
    if mode not in ("read", "read_write"):
        raise ValueError("mode must be read or read_write")
    root = tempfile.mkdtemp(prefix=f"rw-{mode}-", dir=target_dir)
    chunk = os.urandom(min(file_size_bytes, 1 << 20))
    srcs = []
    for k in range(concurrency):
        path = os.path.join(root, f"src-{k}")
        with open(path, "wb") as f:
            left = file_size_bytes
            while left > 0:
                f.write(chunk[:left])
                left -= len(chunk)
        srcs.append(path)
    try:
        collected = _run_workers(
            _rw_worker,
            lambda k: (mode, k, srcs[k], os.path.join(root, f"dst-{k}"), block_bytes),
            concurrency, use_processes)
    finally:
        shutil.rmtree(root, ignore_errors=True)
    report = BenchReport(f"readwrite_{mode}", {"file_size_bytes": file_size_bytes,
                                               "concurrency": concurrency, "mode": mode,
                                               "block_bytes": block_bytes,
                                               "processes": use_processes})
    starts, ends, total, errors = [], [], 0, 0
    for _, (t0, t1, n), err in collected:
        starts.append(t0)
        ends.append(t1)
        total += n
        errors += err
        report.samples.append((t1 - t0) * 1000.0)
    elapsed = max(ends) - min(starts)
    report.partial = errors > 0
    report.derived.update({"bytes": float(total), "elapsed_s": elapsed,
                           "aggregate_mb_per_s": total / elapsed / 1e6 if elapsed > 0 else 0.0})
    return report


# ---------------------------------------------------------------------------
# CLI


def build_parser(parser=None):
    parser = parser or argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="bench-out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("throughput", help="sleep-0 dispatch throughput")
    t.add_argument("--slots", type=int, default=64)
    t.add_argument("--num-tasks", type=int, default=50_000)
    t.add_argument("--dispatchers", type=int, default=1)
    t.add_argument("--mode", choices=("local", "simulated"), default="local")
    common(t)

    e = sub.add_parser("efficiency", help="efficiency versus task length")
    e.add_argument("--slots", type=int, default=64)
    e.add_argument("--task-lengths", default="0.25,0.5,1,2,4")
    e.add_argument("--tasks-per-point", type=int, default=None)
    e.add_argument("--mode", choices=("local", "simulated"), default="local")
    e.add_argument("--overhead-s", type=float, default=0.0, help="simulated per-task overhead")
    common(e)

    f = sub.add_parser("fsops", help="concurrent metadata operations")
    f.add_argument("--op", choices=FS_OPS, default="create_file")
    f.add_argument("--concurrency", type=int, default=64)
    f.add_argument("--layout", choices=("single_dir", "many_dirs"), default="single_dir")
    f.add_argument("--ops-per-worker", type=int, default=1)
    f.add_argument("--target-dir", default=tempfile.gettempdir())
    f.add_argument("--threads", action="store_true", help="use threads instead of processes")
    common(f)

    r = sub.add_parser("readwrite", help="bulk read / read+write throughput")
    r.add_argument("--file-size-bytes", type=int, default=10_000_000)
    r.add_argument("--concurrency", type=int, default=4)
    r.add_argument("--mode", choices=("read", "read_write"), default="read")
    r.add_argument("--block-bytes", type=int, default=BLOCK_BYTES)
    r.add_argument("--target-dir", default=tempfile.gettempdir())
    r.add_argument("--threads", action="store_true")
    common(r)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s bench %(levelname)s %(message)s")
    if args.command == "throughput":
        report = bench_dispatch_throughput(args.slots, args.num_tasks, args.dispatchers, args.mode)
    elif args.command == "efficiency":
        lengths = [float(x) for x in args.task_lengths.split(",")]
        points = bench_efficiency_sweep(args.slots, lengths, args.tasks_per_point, args.mode,
                                        overhead_s=args.overhead_s)
        report = efficiency_report(points)
        emit_report(report, args.out, "plotdata")
    elif args.command == "fsops":
        report = bench_fsops(args.op, args.concurrency, args.layout, args.target_dir,
                             args.ops_per_worker, not args.threads)
    else:
        report = bench_readwrite(args.file_size_bytes, args.concurrency, args.mode,
                                 args.target_dir, args.block_bytes, not args.threads)
    for path in emit_report(report, args.out, "csv"):
        print(path)
    for k, v in sorted({**report.aggregates, **report.derived}.items()):
        print(f"{k:32s} {v:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
