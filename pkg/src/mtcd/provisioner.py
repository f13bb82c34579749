"""Pset-granularity resource provisioning, real or simulated.

Allocations are granted in whole psets.  In ``simulated`` mode an
allocation becomes ready after the modeled boot time on a virtual clock and
workloads can be replayed against the real dispatcher core with exact
(``Fraction``) timing.  In ``real`` mode each pset maps to a small group of
local executor processes attached to a running dispatcher.
"""

import argparse
import heapq
import itertools
import logging
import math
import os
import selectors
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from . import protocol as P
from .dispatcher import DispatcherCore
from .protocol import Kind, Message, TaskDescriptor, TaskResult, TaskStatus

log = logging.getLogger(__name__)

CORES_PER_PSET = 256
CORES_PER_NODE = 4
DEFAULT_ANCHORS = ((256, 125.0), (163840, 1326.0))
DEFAULT_SCALE_FACTOR = 8 / CORES_PER_PSET


class AllocationError(RuntimeError):
    pass


class BootModel:
    """Boot-to-first-task latency as a function of allocated cores.

    Piecewise linear in log(cores) between anchor points; exact at anchors,
    flat below the first anchor and extrapolated along the last segment
    above the final one.
    """

    def __init__(self, anchors: Sequence[Tuple[float, float]] = DEFAULT_ANCHORS):
        pts = sorted((float(c), float(s)) for c, s in anchors)
        if not pts:
            raise ValueError("need at least one anchor")
        if any(c <= 0 for c, _ in pts):
            raise ValueError("anchor core counts must be positive")
        if len({c for c, _ in pts}) != len(pts):
            raise ValueError("duplicate anchor core count")
        if any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            raise ValueError("boot time must be non-decreasing in cores")
        self.anchors = pts

    @classmethod
    def from_file(cls, path):
        """Read ``cores seconds`` pairs, one per line; ``#`` starts a comment."""
        anchors = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                text = line.split("#", 1)[0].replace(",", " ").split()
                if not text:
                    continue
                if len(text) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'cores seconds'")
                anchors.append((float(text[0]), float(text[1])))
        return cls(anchors)

    def boot_time(self, cores) -> float:
        pts = self.anchors
        for c, s in pts:
            if cores == c:
                return s
        if cores <= pts[0][0] or len(pts) == 1:
            return pts[0][1] if cores <= pts[0][0] else pts[-1][1]
        for (c0, s0), (c1, s1) in zip(pts, pts[1:]):
            if cores < c1:
                break
        frac = (math.log(cores) - math.log(c0)) / (math.log(c1) - math.log(c0))
        return s0 + frac * (s1 - s0)


@dataclass
class Allocation:
    allocation_id: str
    pset_count: int
    cores_per_pset: int
    duration_s: float
    boot_model: BootModel
    mode: str = "simulated"
    state: str = "booting"
    t_requested: float = 0.0
    t_ready: Optional[float] = None
    dispatcher: Optional[str] = None
    processes: List[subprocess.Popen] = field(default_factory=list, repr=False)
    executor_ids: List[str] = field(default_factory=list)

    @property
    def cores(self):
        return self.pset_count * self.cores_per_pset

    @property
    def boot_s(self):
        return self.boot_model.boot_time(self.cores)


class VirtualClock:
    def __init__(self, start=0):
        self.now = Fraction(start)

    def advance(self, seconds):
        self.now += Fraction(seconds)
        return self.now


class Provisioner:
    """Grants allocations; single-threaded and command driven."""

    def __init__(self, boot_model=None, clock=None, scale_factor=DEFAULT_SCALE_FACTOR,
                 cache_root=None):
        self.boot_model = boot_model or BootModel()
        self.clock = clock or VirtualClock()
        self.scale_factor = scale_factor
        self.cache_root = cache_root  # created on first real allocation if None
        self.allocations = {}
        self._ids = itertools.count(1)

    def executors_per_pset(self, cores_per_pset):
        return max(1, round(cores_per_pset * self.scale_factor))

    def request_allocation(self, pset_count, cores_per_pset=CORES_PER_PSET, duration_s=3600,
                           mode="simulated", dispatcher=None, ready_timeout_s=None) -> Allocation:
        if not isinstance(pset_count, int) or pset_count < 1:
            raise ValueError("pset_count must be a positive integer")
        if cores_per_pset < 1:
            raise ValueError("cores_per_pset must be positive")
        alloc = Allocation(f"a{next(self._ids)}", pset_count, cores_per_pset, duration_s,
                           self.boot_model, mode=mode)
        self.allocations[alloc.allocation_id] = alloc
        if mode == "simulated":
            alloc.t_requested = self.clock.now
            if alloc.boot_s > duration_s:
                alloc.state = "failed"
                raise AllocationError(f"boot takes {alloc.boot_s:.0f} s, longer than the "
                                      f"{duration_s} s allocation")
            alloc.t_ready = alloc.t_requested + Fraction(alloc.boot_s)
            return alloc
        if mode != "real":
            raise ValueError(f"unknown mode {mode!r}")
        if not dispatcher:
            raise ValueError("real mode needs a dispatcher address")
        alloc.dispatcher = dispatcher
        alloc.t_requested = time.monotonic()
        self._launch(alloc, min(duration_s, ready_timeout_s or duration_s))
        return alloc

    def wait_ready(self, alloc: Allocation):
        """Simulated mode: advance the virtual clock until ``alloc`` has booted."""
        if alloc.state == "booting" and alloc.mode == "simulated":
            if self.clock.now < alloc.t_ready:
                self.clock.now = Fraction(alloc.t_ready)
            alloc.state = "ready"
        return alloc

    def poll(self, alloc: Allocation):
        if alloc.mode == "simulated" and alloc.state == "booting" and \
                self.clock.now >= alloc.t_ready:
            alloc.state = "ready"
        return alloc.state

    def _launch(self, alloc, deadline_s):
        n = alloc.pset_count * self.executors_per_pset(alloc.cores_per_pset)
        if self.cache_root is None:
            base = "/dev/shm" if os.path.isdir("/dev/shm") else None
            self.cache_root = tempfile.mkdtemp(prefix="mtcd-prov-", dir=base)
        sel = selectors.DefaultSelector()
        for k in range(n):
            cache_dir = os.path.join(self.cache_root, alloc.allocation_id, str(k))
            cmd = [sys.executable, "-m", "mtcd.executor", "run", "--dispatcher", alloc.dispatcher,
                   "--slots", "1", "--cache-dir", cache_dir, "--group", alloc.allocation_id,
                   "--address", f"{alloc.allocation_id}/{k}", "--announce"]
            proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stdin=subprocess.DEVNULL)
            alloc.processes.append(proc)
            sel.register(proc.stdout, selectors.EVENT_READ, proc)
        end = time.monotonic() + deadline_s
        waiting = n
        while waiting:
            left = end - time.monotonic()
            if left <= 0:
                break
            for key, _ in sel.select(left):
                line = key.fileobj.readline().decode().split()
                sel.unregister(key.fileobj)
                waiting -= 1
                if len(line) == 2 and line[0] == "REGISTERED":
                    alloc.executor_ids.append(line[1])
        sel.close()
        if len(alloc.executor_ids) < n:
            self.release(alloc)
            alloc.state = "failed"
            raise AllocationError(f"only {len(alloc.executor_ids)} of {n} executors registered")
        alloc.state = "ready"
        alloc.t_ready = time.monotonic()
        log.info("allocation %s ready: %d executors", alloc.allocation_id, n)

    def release(self, alloc: Allocation, timeout_s=10.0):
        if alloc.state in ("released", "failed") and not alloc.processes:
            return
        if alloc.mode == "real" and alloc.processes:
            try:
                with socket.create_connection(P.parse_address(alloc.dispatcher), timeout=5) as s:
                    s.sendall(P.encode(Message(Kind.SHUTDOWN, {"group": alloc.allocation_id})))
            except OSError as exc:
                log.warning("could not ask dispatcher to shut down %s: %s", alloc.allocation_id, exc)
            end = time.monotonic() + timeout_s
            for proc in alloc.processes:
                try:
                    proc.wait(max(0.1, end - time.monotonic()))
                except subprocess.TimeoutExpired:
                    proc.terminate()
                    try:
                        proc.wait(2)
                    except subprocess.TimeoutExpired:
                        proc.kill()
                        proc.wait()
                if proc.stdout:
                    proc.stdout.close()
            alloc.processes = []
            shutil.rmtree(os.path.join(self.cache_root, alloc.allocation_id), ignore_errors=True)
        alloc.state = "released"


def amortized_startup_fraction(startup_s, makespan_s) -> float:
    if startup_s < 0 or makespan_s < 0:
        raise ValueError("times must be non-negative")
    if startup_s == 0 and makespan_s == 0:
        raise ValueError("startup and makespan cannot both be zero")
    return startup_s / (startup_s + makespan_s)


@dataclass
class StartupBreakdown:
    total_s: float
    fractions: dict
    coverage: float


def startup_breakdown(total_boot_s, components) -> StartupBreakdown:
    """Share of ``total_boot_s`` taken by each named component."""
    if isinstance(components, dict):
        components = list(components.items())
    components = [(str(name), float(sec)) for name, sec in components]
    if total_boot_s <= 0:
        raise ValueError("total_boot_s must be positive")
    fractions = {name: sec / total_boot_s for name, sec in components}
    return StartupBreakdown(total_boot_s, fractions, sum(sec for _, sec in components) / total_boot_s)


# ---------------------------------------------------------------------------
# simulated execution on the virtual clock


@dataclass
class SimRun:
    results: List[TaskResult]
    first_dispatch_s: Fraction
    last_finish_s: Fraction
    slots: int

    @property
    def makespan_s(self) -> Fraction:
        return self.last_finish_s - self.first_dispatch_s


class _SimExecutorConn:
    def __init__(self, sim):
        self.sim = sim
        self.executor_id = None

    def send(self, msg):
        if msg.kind is Kind.TASK_DISPATCH:
            self.sim._started(self, msg.payload)


class _SimOwner:
    def __init__(self):
        self.results = []

    def send(self, msg):
        if msg.kind is Kind.RESULT_NOTIFY:
            self.results.append(msg.payload["result"])


class _Simulation:
    def __init__(self, slots_per_executor, n_executors, dispatch_cost_s, task_overhead_s):
        self.core = DispatcherCore()
        self.dispatch_cost = Fraction(dispatch_cost_s)
        self.overhead = Fraction(task_overhead_s)
        self.events = []
        self.seq = itertools.count()
        self.now = Fraction(0)
        self.dispatcher_free = Fraction(0)
        self.lengths = {}
        for k in range(n_executors):
            conn = _SimExecutorConn(self)
            ack = self.core.register_executor(
                {"version": P.PROTOCOL_VERSION, "slots": slots_per_executor,
                 "address": f"sim/{k}"}, conn, self._ms(self.now))
            conn.executor_id = ack.payload["executor_id"]

    @staticmethod
    def _ms(t):
        return t * 1000

    def _started(self, conn, payload):
        task_id = payload["task"]["task_id"]
        start = max(self.now, self.dispatcher_free) + self.dispatch_cost
        self.dispatcher_free = start
        finish = start + self.overhead + self.lengths[task_id]
        heapq.heappush(self.events, (finish, next(self.seq), conn.executor_id, task_id,
                                     payload["t_submitted"], start))

    def run(self, tasks):
        owner = _SimOwner()
        self.core.submit(tasks, owner, self._ms(self.now))
        self.core.schedule_step(self._ms(self.now))
        while self.events:
            finish, _, eid, task_id, t_sub, start = heapq.heappop(self.events)
            self.now = finish
            ms = self._ms(finish)
            self.core.handle_result(
                TaskResult(task_id, 0, TaskStatus.SUCCESS, eid, t_sub, t_sub, self._ms(start), ms),
                ms)
            if not self.events or self.events[0][0] != finish:
                self.core.schedule_step(ms)
        return owner.results


def simulate_workload(task_lengths_s, slots, *, slots_per_executor=CORES_PER_NODE,
                      dispatch_cost_s=0, task_overhead_s=0, start_s=0) -> SimRun:
    """Replay sleep tasks of the given lengths through ``DispatcherCore``.

    Executors are instantaneous unless ``task_overhead_s`` (per task) or
    ``dispatch_cost_s`` (serial per dispatch) are set.  All times are exact
    fractions of a second.
    """
    if slots % slots_per_executor:
        slots_per_executor = 1
    sim = _Simulation(slots_per_executor, slots // slots_per_executor, dispatch_cost_s,
                      task_overhead_s)
    sim.now = sim.dispatcher_free = Fraction(start_s)
    tasks = []
    for i, length in enumerate(task_lengths_s):
        tid = f"s{i:07d}"
        sim.lengths[tid] = Fraction(length)
        tasks.append(TaskDescriptor(tid, "/bin/sleep", [f"{float(length):g}"]))
    raw = sim.run(tasks)
    results = [TaskResult.from_dict(r) for r in raw]
    first = min(Fraction(r.t_dispatched) for r in results) / 1000
    last = max(Fraction(r.t_finished) for r in results) / 1000
    return SimRun(results, first, last, slots)


def run_on_allocation(provisioner: Provisioner, alloc: Allocation, task_lengths_s, **kwargs):
    """Boot ``alloc`` on the virtual clock, then run the workload on its cores."""
    if alloc.mode != "simulated":
        raise ValueError("run_on_allocation needs a simulated allocation")
    provisioner.wait_ready(alloc)
    run = simulate_workload(task_lengths_s, alloc.cores, start_s=provisioner.clock.now, **kwargs)
    provisioner.clock.now = max(provisioner.clock.now, run.last_finish_s)
    return run


def build_parser(parser=None):
    parser = parser or argparse.ArgumentParser(prog="provision", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    s = sub.add_parser("start", help="request an allocation")
    s.add_argument("--psets", type=int, required=True)
    s.add_argument("--cores-per-pset", type=int, default=CORES_PER_PSET)
    s.add_argument("--scale-factor", type=float, default=DEFAULT_SCALE_FACTOR,
                   help="local executors per logical core in real mode")
    s.add_argument("--duration-s", type=float, default=3600)
    s.add_argument("--dispatcher", help="HOST:PORT (real mode)")
    s.add_argument("--mode", choices=("real", "simulated"), default="simulated")
    s.add_argument("--boot-model", help="file of 'cores seconds' anchor pairs")
    s.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s provision %(levelname)s %(message)s")
    model = BootModel.from_file(args.boot_model) if args.boot_model else BootModel()
    prov = Provisioner(model, scale_factor=args.scale_factor)
    try:
        alloc = prov.request_allocation(args.psets, args.cores_per_pset, args.duration_s,
                                        args.mode, args.dispatcher)
    except AllocationError as exc:
        print(f"allocation failed: {exc}", file=sys.stderr)
        return 1
    if args.mode == "simulated":
        prov.wait_ready(alloc)
        print(f"{alloc.allocation_id} cores={alloc.cores} boot_s={alloc.boot_s:.1f} "
              f"ready_at_s={float(alloc.t_ready):.1f}")
        return 0
    print(f"{alloc.allocation_id} cores={alloc.cores} executors={len(alloc.executor_ids)} ready",
          flush=True)
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        time.sleep(max(0.0, args.duration_s - (time.monotonic() - alloc.t_requested)))
    except KeyboardInterrupt:
        pass
    finally:
        prov.release(alloc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
