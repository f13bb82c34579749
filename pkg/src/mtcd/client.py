"""Client library: load workloads and stream them to one or more dispatchers.

Submission uses credit-based flow control.  Each dispatcher gets a credit
limit of ``advertised_slots * credit_multiplier``; the next task always goes
to the reachable dispatcher with the most unused credit (round-robin among
ties), and submission blocks while no dispatcher has credit left.
"""

import argparse
import csv
import json
import logging
import os
import socket
import sys
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from . import protocol as P
from .protocol import Kind, Message, TaskDescriptor, TaskResult, TaskStatus

log = logging.getLogger(__name__)

CREDIT_MULTIPLIER = 3
MAX_BATCH = 512


class WorkloadError(ValueError):
    pass


class RunFailed(RuntimeError):
    pass


@dataclass
class Workload:
    tasks: List[TaskDescriptor]
    name: str = ""
    created_at: float = field(default_factory=time.time)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


def iter_workload(path):
    """Yield descriptors from a workload file without holding them all in memory.

    One JSON task record per line; blank lines and ``#`` lines are skipped.
    """
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                record = json.loads(text)
                if not isinstance(record, dict):
                    raise ValueError("record is not an object")
                if "executable" not in record:
                    raise ValueError("missing 'executable'")
                desc = TaskDescriptor.from_dict(record)
            except (ValueError, TypeError, KeyError) as exc:
                raise WorkloadError(f"{path}:{lineno}: {exc}") from exc
            if desc.task_id in seen:
                raise WorkloadError(f"{path}:{lineno}: duplicate task_id {desc.task_id!r}")
            seen.add(desc.task_id)
            yield desc


def load_workload(path) -> Workload:
    return Workload(list(iter_workload(path)), name=os.path.basename(str(path)),
                    created_at=os.path.getmtime(path))


def write_workload(path, tasks: Iterable[TaskDescriptor], comment=None):
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        for t in tasks:
            f.write(json.dumps(t.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def sleep_tasks(n, seconds=0, prefix="t", retries=3, wall_time_limit_s=3600):
    """``n`` synthetic ``sleep`` tasks with no I/O."""
    arg = f"{seconds:g}"
    width = len(str(max(n - 1, 0)))
    return [TaskDescriptor(f"{prefix}{i:0{width}d}", "/bin/sleep", [arg],
                           wall_time_limit_s=wall_time_limit_s, retries_remaining=retries)
            for i in range(n)]


@dataclass
class DispatcherHandle:
    address: str
    advertised_slots: int
    credit_limit: int
    outstanding: int = 0
    reachable: bool = True
    sent: int = 0
    finalized: int = 0
    peak_outstanding: int = 0

    @property
    def credit(self):
        return self.credit_limit - self.outstanding


class CreditBalancer:
    """Pick the dispatcher for the next task; pure bookkeeping, no I/O."""

    def __init__(self, handles: List[DispatcherHandle]):
        self.handles = handles
        self._rr = 0

    def choose(self) -> Optional[int]:
        best, best_credit = None, 0
        n = len(self.handles)
        for k in range(n):
            i = (self._rr + k) % n
            h = self.handles[i]
            if h.reachable and h.credit > best_credit:
                best, best_credit = i, h.credit
        if best is not None:
            self._rr = (best + 1) % n
        return best


@dataclass
class Summary:
    total: int
    counts: Dict[str, int]
    makespan_s: float
    throughput: float
    complete: bool
    per_dispatcher: Dict[str, int] = field(default_factory=dict)


class RunHandle:
    """State of one submission run; ``Client.wait_all`` may be called from any thread."""

    def __init__(self, cond):
        self.results: Dict[str, TaskResult] = {}
        self.submitted_ms: Dict[str, float] = {}
        self.cond = cond
        self.submission_done = False
        self.error: Optional[str] = None
        self.unsent = 0
        self.outstanding_samples: Optional[List[tuple]] = None
        self.thread = None
        self.cancelled = False

    @property
    def expected(self):
        return len(self.submitted_ms) + self.unsent


class Client:
    def __init__(self, addresses, credit_multiplier=CREDIT_MULTIPLIER, credit_limits=None,
                 connect_timeout=10.0):
        if isinstance(addresses, str):
            addresses = addresses.split(",")
        self.handles: List[DispatcherHandle] = []
        self._socks: List[Optional[socket.socket]] = []
        self._locks = []
        self._readers = []
        self._inflight: List[Dict[str, TaskDescriptor]] = []
        self._run: Optional[RunHandle] = None
        self._reroute = deque()
        self._closed = False
        for i, addr in enumerate(addresses):
            sock = socket.create_connection(P.parse_address(addr), timeout=connect_timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(P.encode(Message(Kind.STATS_REQUEST)))
            reply = P.decode(sock)
            if reply.kind is not Kind.STATS_REPLY:
                raise P.ProtocolError(f"{addr}: expected STATS_REPLY, got {reply.kind.name}")
            slots = reply.payload["total_slots"]
            limit = credit_limits[i] if credit_limits else max(1, slots * credit_multiplier)
            self.handles.append(DispatcherHandle(addr, slots, limit))
            self._socks.append(sock)
            self._locks.append(threading.Lock())
            self._inflight.append({})
        self.balancer = CreditBalancer(self.handles)
        self.cond = threading.Condition()
        for i in range(len(self.handles)):
            t = threading.Thread(target=self._reader, args=(i,), daemon=True,
                                 name=f"reader-{self.handles[i].address}")
            t.start()
            self._readers.append(t)

    # -- result path -------------------------------------------------------

    def _reader(self, i):
        sock = self._socks[i]
        decoder = P.FrameDecoder()
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                results = []
                for msg in decoder.feed(data):
                    if msg.kind is Kind.RESULT_NOTIFY:
                        results.append(TaskResult.from_dict(msg.payload["result"]))
                    elif msg.kind is Kind.SUBMIT_ACK:
                        for rej in msg.payload["rejected"]:
                            self._on_rejected(i, rej)
                    elif msg.kind is Kind.ERROR:
                        log.warning("%s: %s", self.handles[i].address, msg.payload["message"])
                if results:
                    with self.cond:
                        for r in results:
                            self._finish(i, r)
                        self.cond.notify_all()
        except (OSError, P.ProtocolError) as exc:
            if not self._closed:
                log.warning("connection to %s failed: %s", self.handles[i].address, exc)
        self._on_unreachable(i)

    def _finish(self, i, result):
        # caller holds self.cond
        h = self.handles[i]
        if self._inflight[i].pop(result.task_id, None) is None:
            return
        h.outstanding -= 1
        h.finalized += 1
        run = self._run
        if run is not None and result.task_id not in run.results:
            run.results[result.task_id] = result

    def _on_rejected(self, i, rej):
        tid = rej.get("task_id")
        with self.cond:
            desc = self._inflight[i].get(tid)
            if desc is None:
                return
            now = time.monotonic() * 1000.0
            t_sub = self._run.submitted_ms.get(tid, now) if self._run else now
            self._finish(i, TaskResult(tid, -1, TaskStatus.SYSTEM_FAILURE, "", t_sub, t_sub,
                                       t_sub, now, detail=f"rejected: {rej.get('reason')}"))
            self.cond.notify_all()

    def _on_unreachable(self, i):
        with self.cond:
            h = self.handles[i]
            if not h.reachable:
                return
            h.reachable = False
            orphans = list(self._inflight[i].values())
            self._inflight[i].clear()
            h.outstanding = 0
            if orphans:
                log.warning("%s unreachable; rerouting %d tasks", h.address, len(orphans))
            self._reroute.extend(orphans)
            self.cond.notify_all()

    # -- submission --------------------------------------------------------

    def _flush(self, i, batch):
        if not batch:
            return
        try:
            with self._locks[i]:
                self._socks[i].sendall(P.encode(P.submit(batch)))
        except OSError as exc:
            log.warning("send to %s failed: %s", self.handles[i].address, exc)
            try:
                self._socks[i].shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._on_unreachable(i)

    def _next_task(self, it):
        with self.cond:
            if self._reroute:
                return self._reroute.popleft()
        return next(it, None)

    def _submit_loop(self, tasks, run: RunHandle):
        it = iter(tasks)
        pending = [[] for _ in self.handles]
        samples = run.outstanding_samples

        def flush_all():
            for j, batch in enumerate(pending):
                if batch:
                    pending[j] = []
                    self._flush(j, batch)

        desc = None
        try:
            while not run.cancelled:
                desc = self._next_task(it)
                if desc is None:
                    flush_all()
                    # a dispatcher dropping out late hands its tasks back here
                    with self.cond:
                        while not self._reroute and self._outstanding_anywhere():
                            self.cond.wait(0.5)
                        if not self._reroute:
                            break
                    continue
                while not run.cancelled:
                    with self.cond:
                        i = self.balancer.choose()
                        if i is not None:
                            h = self.handles[i]
                            h.outstanding += 1
                            h.sent += 1
                            h.peak_outstanding = max(h.peak_outstanding, h.outstanding)
                            if samples is not None:
                                samples.append((i, h.outstanding, h.credit_limit))
                            self._inflight[i][desc.task_id] = desc
                            run.submitted_ms.setdefault(desc.task_id, time.monotonic() * 1000.0)
                            pending[i].append(desc)
                            break
                        if not any(h.reachable for h in self.handles):
                            raise RunFailed("all dispatchers unreachable")
                        if not any(pending):
                            self.cond.wait(0.5)
                            continue
                    flush_all()
                if run.cancelled:
                    break
                desc = None
                if len(pending[i]) >= MAX_BATCH:
                    batch, pending[i] = pending[i], []
                    self._flush(i, batch)
        except RunFailed as exc:
            log.error("%s", exc)
            with self.cond:
                run.error = str(exc)
                run.unsent = (desc is not None) + len(self._reroute) + sum(1 for _ in it)
                self._reroute.clear()
        finally:
            flush_all()  # keep credit accounting exact if the run was cancelled
            with self.cond:
                run.submission_done = True
                self.cond.notify_all()

    def _outstanding_anywhere(self):
        return any(h.outstanding for h in self.handles if h.reachable)

    def submit_all(self, workload: Iterable[TaskDescriptor], trace=False) -> RunHandle:
        """Start streaming ``workload``; returns immediately with a run handle."""
        if self._run is not None and not self._run.submission_done:
            raise RuntimeError("a run is already in progress")
        if not any(h.reachable for h in self.handles):
            raise RunFailed("no reachable dispatcher")
        run = RunHandle(self.cond)
        if trace:
            run.outstanding_samples = []
        self._run = run
        run.thread = threading.Thread(target=self._submit_loop, args=(workload, run),
                                      daemon=True, name="submit")
        run.thread.start()
        return run

    def wait_all(self, run: RunHandle, timeout_s=None, events_out=None):
        """Block until every task is finalized or ``timeout_s`` passes.

        Returns ``(results, summary)``.  Tasks unfinished at the deadline are
        reported with status ``lost``.
        """
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        with self.cond:
            while True:
                done = run.submission_done and len(run.results) >= len(run.submitted_ms)
                if done or (run.submission_done and run.error):
                    break
                if run.submission_done and not any(h.reachable for h in self.handles):
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    run.cancelled = True
                    self.cond.notify_all()
                    break
                self.cond.wait(0.5 if remaining is None else min(0.5, remaining))
            results = dict(run.results)
            now = time.monotonic() * 1000.0
            for tid, t_sub in run.submitted_ms.items():
                if tid not in results:
                    results[tid] = TaskResult(tid, -1, TaskStatus.LOST, "", t_sub, t_sub, t_sub,
                                              max(now, t_sub), detail="lost to client")
            complete = len(run.results) == len(run.submitted_ms) and not run.error and \
                run.submission_done
        ordered = [results[tid] for tid in run.submitted_ms]
        summary = summarize(ordered, complete)
        summary.per_dispatcher = {h.address: h.finalized for h in self.handles}
        if events_out:
            write_events(events_out, ordered, run.submitted_ms)
        return ordered, summary

    def run(self, workload, timeout_s=None, events_out=None):
        return self.wait_all(self.submit_all(workload), timeout_s, events_out)

    def close(self):
        self._closed = True
        for sock in self._socks:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in self._readers:
            t.join(2)
        for sock in self._socks:
            sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def makespan_s(results):
    real = [r for r in results if r.executor_id]
    if not real:
        return 0.0
    first = min(r.t_dispatched for r in real)
    last = max(r.t_finished for r in real)
    return (last - first) / 1000.0


def summarize(results, complete=True) -> Summary:
    counts = Counter(r.status.value for r in results)
    span = makespan_s(results)
    finalized = sum(1 for r in results if r.status is not TaskStatus.LOST or r.executor_id)
    throughput = finalized / span if span > 0 else 0.0
    return Summary(len(results), dict(counts), span, throughput, complete)


def write_events(path, results, submitted_ms):
    """Per-task event log: ``task_id,event,timestamp_ms``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task_id", "event", "timestamp_ms"])
        for r in results:
            w.writerow([r.task_id, "submitted", f"{submitted_ms.get(r.task_id, r.t_submitted):.3f}"])
            if r.executor_id:
                w.writerow([r.task_id, "dispatched", f"{r.t_dispatched:.3f}"])
                w.writerow([r.task_id, "started", f"{r.t_started:.3f}"])
            w.writerow([r.task_id, "finished", f"{r.t_finished:.3f}"])


def build_parser(parser=None):
    parser = parser or argparse.ArgumentParser(prog="client", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    s = sub.add_parser("submit", help="submit a workload file and wait for results")
    s.add_argument("--workload", required=True)
    s.add_argument("--dispatchers", required=True, help="HOST:PORT[,HOST:PORT...]")
    s.add_argument("--credit-multiplier", type=int, default=CREDIT_MULTIPLIER)
    s.add_argument("--timeout-s", type=float, default=None)
    s.add_argument("--events-out", help="CSV event log path")
    s.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s client %(levelname)s %(message)s")
    with Client(args.dispatchers, credit_multiplier=args.credit_multiplier) as client:
        _, summary = client.run(iter_workload(args.workload), args.timeout_s, args.events_out)
    counts = " ".join(f"{k}={v}" for k, v in sorted(summary.counts.items()))
    print(f"tasks={summary.total} {counts} makespan_s={summary.makespan_s:.3f} "
          f"throughput={summary.throughput:.1f}/s complete={summary.complete}")
    return 0 if summary.complete and summary.counts.get("success", 0) == summary.total else 1


if __name__ == "__main__":
    sys.exit(main())
