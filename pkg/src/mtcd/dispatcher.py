"""Dispatcher: task queue, executor registry, scheduling and failure handling.

``DispatcherCore`` holds all dispatcher state and is driven by explicit
``now_ms`` arguments, so scheduling, liveness and suspension can be tested
against a controlled clock.  ``DispatcherServer`` wraps it in an asyncio
event loop, which serializes every state mutation.
"""

import argparse
import asyncio
import bisect
import csv
import enum
import logging
import os
import signal
import subprocess
import sys
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from . import protocol as P
from .protocol import Kind, Message, TaskDescriptor, TaskResult, TaskStatus

log = logging.getLogger(__name__)

HEARTBEAT_MS = 5000
MISSED_BEATS = 3
SUSPEND_FAILURES = 3
SUSPEND_WINDOW_MS = 60_000
MAX_RETRIES = 3
THROUGHPUT_WINDOW_MS = 1000


def monotonic_ms():
    return time.monotonic() * 1000.0


class ExecState(str, enum.Enum):
    REGISTERING = "registering"
    IDLE = "idle"
    BUSY = "busy"
    SUSPENDED = "suspended"
    DEAD = "dead"


@dataclass
class ExecutorRecord:
    executor_id: str
    address: str
    slots: int
    conn: object = field(repr=False, default=None)
    group: Optional[str] = None
    busy_slots: int = 0
    state: ExecState = ExecState.IDLE
    registered_ms: float = 0.0
    last_heartbeat_ms: float = 0.0
    failure_events: List[tuple] = field(default_factory=list)
    running: set = field(default_factory=set)

    @property
    def accepting(self):
        return self.state in (ExecState.IDLE, ExecState.BUSY) and self.busy_slots < self.slots


@dataclass
class DispatcherStats:
    submitted: int = 0
    queued: int = 0
    dispatched_running: int = 0
    completed_ok: int = 0
    failed_app: int = 0
    failed_system: int = 0
    rescheduled: int = 0
    current_throughput_tasks_per_s: float = 0.0
    registered_executors: int = 0
    suspended_executors: int = 0
    total_slots: int = 0

    def to_dict(self):
        return asdict(self)


class _Phase(enum.Enum):
    QUEUED = 1
    RUNNING = 2
    DONE = 3


class _Task:
    __slots__ = ("desc", "owner", "phase", "executor_id", "t_submitted", "t_dispatched",
                 "retries")

    def __init__(self, desc, owner, t_submitted, retries):
        self.desc = desc
        self.owner = owner
        self.phase = _Phase.QUEUED
        self.executor_id = None
        self.t_submitted = t_submitted
        self.t_dispatched = None
        self.retries = retries


class DispatcherCore:
    """All dispatcher state; every public method must run on one thread.

    Connections are opaque objects with a ``send(Message)`` method that
    raises ``ConnectionError`` when the peer is gone.
    """

    def __init__(self, heartbeat_ms=HEARTBEAT_MS, suspend_failures=SUSPEND_FAILURES,
                 suspend_window_ms=SUSPEND_WINDOW_MS, max_retries=MAX_RETRIES, on_event=None):
        self.heartbeat_ms = heartbeat_ms
        self.suspend_failures = suspend_failures
        self.suspend_window_ms = suspend_window_ms
        self.max_retries = max_retries
        self.on_event = on_event
        self.executors: Dict[str, ExecutorRecord] = {}
        self._order = []  # (registered_ms, executor_id) for live executors, sorted
        self._next_id = 0
        self.queue = deque()
        self.tasks: Dict[str, _Task] = {}
        self._completions = deque()
        self.counts = dict(submitted=0, completed_ok=0, failed_app=0, failed_system=0,
                           rescheduled=0, running=0)

    def _event(self, task_id, event, now_ms):
        if self.on_event is not None:
            self.on_event(task_id, event, now_ms)

    # -- executors ---------------------------------------------------------

    def register_executor(self, hello: dict, conn, now_ms) -> Message:
        version = hello.get("version")
        if version != P.PROTOCOL_VERSION:
            return P.error("version", f"protocol version {version!r} not supported, "
                                      f"expected {P.PROTOCOL_VERSION}")
        slots = hello.get("slots")
        if not isinstance(slots, int) or isinstance(slots, bool) or slots < 1:
            return P.error("slots", f"slots must be a positive integer, got {slots!r}")
        address = str(hello.get("address"))
        for rec in list(self.executors.values()):
            if rec.address == address:
                log.info("executor %s re-registered from %s; retiring old record",
                         rec.executor_id, address)
                self._mark_dead(rec, now_ms)
        self._next_id += 1
        executor_id = f"e{self._next_id:06d}"
        rec = ExecutorRecord(executor_id, address, slots, conn=conn, group=hello.get("group"),
                             registered_ms=now_ms, last_heartbeat_ms=now_ms)
        self.executors[executor_id] = rec
        bisect.insort(self._order, (now_ms, executor_id))
        return Message(Kind.REGISTER_ACK, {"executor_id": executor_id,
                                           "heartbeat_interval_ms": self.heartbeat_ms})

    def heartbeat(self, executor_id, now_ms):
        rec = self.executors.get(executor_id)
        if rec is not None:
            rec.last_heartbeat_ms = now_ms

    def executor_lost(self, executor_id, now_ms):
        """Connection to an executor failed or closed."""
        rec = self.executors.get(executor_id)
        if rec is not None:
            self._mark_dead(rec, now_ms)

    def executor_departed(self, executor_id, now_ms):
        """Executor closed its connection after a SHUTDOWN: drop it from the registry."""
        self.executor_lost(executor_id, now_ms)

    def _mark_dead(self, rec, now_ms):
        if rec.state is ExecState.DEAD:
            return
        rec.state = ExecState.DEAD
        del self.executors[rec.executor_id]
        i = bisect.bisect_left(self._order, (rec.registered_ms, rec.executor_id))
        if i < len(self._order) and self._order[i] == (rec.registered_ms, rec.executor_id):
            del self._order[i]
        for task_id in sorted(rec.running):
            task = self.tasks[task_id]
            self.counts["running"] -= 1
            task.phase = _Phase.QUEUED
            task.executor_id = None
            lost = TaskResult(task_id, -1, TaskStatus.LOST, rec.executor_id, task.t_submitted,
                              task.t_dispatched, now_ms, now_ms, detail="executor lost")
            self._event(task_id, "lost", now_ms)
            self._retry_or_fail(task, lost, now_ms)
        rec.running.clear()
        rec.busy_slots = 0

    def check_liveness(self, now_ms) -> List[str]:
        limit = MISSED_BEATS * self.heartbeat_ms
        dead = [rec for rec in self.executors.values()
                if now_ms - rec.last_heartbeat_ms > limit]
        for rec in dead:
            log.warning("executor %s missed heartbeats for %.0f ms; marking dead",
                        rec.executor_id, now_ms - rec.last_heartbeat_ms)
            self._mark_dead(rec, now_ms)
        return [rec.executor_id for rec in dead]

    def apply_suspend_policy(self, rec: ExecutorRecord, now_ms) -> bool:
        """Suspend ``rec`` if too many failures landed in the trailing window."""
        horizon = now_ms - self.suspend_window_ms
        rec.failure_events = [ev for ev in rec.failure_events if ev[0] >= horizon]
        if rec.state in (ExecState.SUSPENDED, ExecState.DEAD):
            return rec.state is ExecState.SUSPENDED
        if len(rec.failure_events) < self.suspend_failures:
            return False
        log.warning("suspending executor %s: %d failures within %d ms", rec.executor_id,
                    len(rec.failure_events), self.suspend_window_ms)
        rec.state = ExecState.SUSPENDED
        try:
            rec.conn.send(Message(Kind.SUSPEND, {"executor_id": rec.executor_id,
                                                 "reason": "too many failures"}))
        except ConnectionError:
            self._mark_dead(rec, now_ms)
        return True

    # -- tasks ---------------------------------------------------------------

    def submit(self, batch, owner, now_ms) -> Message:
        accepted, rejected = [], []
        for item in batch:
            try:
                desc = item if isinstance(item, TaskDescriptor) else TaskDescriptor.from_dict(item)
            except (KeyError, TypeError, ValueError) as exc:
                tid = item.get("task_id") if isinstance(item, dict) else None
                rejected.append({"task_id": tid, "reason": f"invalid: {exc}"})
                continue
            if desc.task_id in self.tasks:
                rejected.append({"task_id": desc.task_id, "reason": "duplicate task_id"})
                continue
            retries = min(desc.retries_remaining, self.max_retries)
            self.tasks[desc.task_id] = _Task(desc, owner, now_ms, retries)
            self.queue.append(desc.task_id)
            self.counts["submitted"] += 1
            accepted.append(desc.task_id)
            self._event(desc.task_id, "submitted", now_ms)
        return Message(Kind.SUBMIT_ACK, {"accepted": accepted, "rejected": rejected})

    def schedule_step(self, now_ms) -> List[tuple]:
        assignments = []
        if not self.queue:
            return assignments
        order = self._order
        executors = self.executors
        i = 0
        while self.queue and i < len(order):
            rec = executors[order[i][1]]
            if not rec.accepting:
                i += 1
                continue
            task_id = self.queue.popleft()
            task = self.tasks[task_id]
            desc = task.desc
            if task.retries != desc.retries_remaining:
                desc.retries_remaining = task.retries
            try:
                rec.conn.send(P.dispatch(desc, task.t_submitted, now_ms))
            except ConnectionError:
                log.warning("send to executor %s failed; marking dead", rec.executor_id)
                self.queue.appendleft(task_id)
                self._mark_dead(rec, now_ms)
                continue  # _order shrank; index i now names the next executor
            task.phase = _Phase.RUNNING
            task.executor_id = rec.executor_id
            task.t_dispatched = now_ms
            rec.running.add(task_id)
            rec.busy_slots += 1
            rec.state = ExecState.BUSY
            self.counts["running"] += 1
            assignments.append((task_id, rec.executor_id))
            self._event(task_id, "dispatched", now_ms)
        return assignments

    def handle_result(self, result: TaskResult, now_ms):
        task = self.tasks.get(result.task_id)
        if task is None:
            log.warning("result for unknown task %s ignored", result.task_id)
            return
        if task.phase is not _Phase.RUNNING or task.executor_id != result.executor_id:
            log.info("discarding stale result for %s from %s", result.task_id, result.executor_id)
            return
        rec = self.executors.get(result.executor_id)
        if rec is not None:
            rec.last_heartbeat_ms = max(rec.last_heartbeat_ms, now_ms)
            rec.running.discard(result.task_id)
            rec.busy_slots -= 1
            if rec.busy_slots == 0 and rec.state is ExecState.BUSY:
                rec.state = ExecState.IDLE
        self.counts["running"] -= 1
        task.executor_id = None
        result.t_submitted = task.t_submitted
        result.t_dispatched = task.t_dispatched
        self._event(result.task_id, "started", result.t_started)
        if result.status in (TaskStatus.SUCCESS, TaskStatus.APP_FAILURE):
            self._finalize(task, result, now_ms)
            return
        self._event(result.task_id, result.status.value, now_ms)
        if rec is not None:
            rec.failure_events.append((now_ms, result.task_id))
        task.phase = _Phase.QUEUED
        self._retry_or_fail(task, result, now_ms)
        if rec is not None:
            self.apply_suspend_policy(rec, now_ms)

    def _retry_or_fail(self, task, result, now_ms):
        if task.retries > 0:
            task.retries -= 1
            self.queue.append(task.desc.task_id)
            self.counts["rescheduled"] += 1
            self._event(task.desc.task_id, "requeued", now_ms)
        else:
            self._finalize(task, result, now_ms)

    def _finalize(self, task, result, now_ms):
        task.phase = _Phase.DONE
        if result.status is TaskStatus.SUCCESS:
            self.counts["completed_ok"] += 1
            event = "finished"
        elif result.status is TaskStatus.APP_FAILURE:
            self.counts["failed_app"] += 1
            event = "failed_app"
        else:
            self.counts["failed_system"] += 1
            event = "failed_system"
        self._completions.append(now_ms)
        self._event(result.task_id, event, result.t_finished)
        if task.owner is not None:
            try:
                task.owner.send(P.result_notify(result))
            except ConnectionError:
                log.info("owner of %s is gone; result dropped", result.task_id)
        task.owner = None
        task.desc = None  # keep the id for duplicate detection only

    def shutdown_group(self, group=None) -> List[str]:
        """Send SHUTDOWN to every live executor in ``group`` (all when None)."""
        sent = []
        for rec in list(self.executors.values()):
            if group is None or rec.group == group:
                try:
                    rec.conn.send(Message(Kind.SHUTDOWN, {"reason": "release"}))
                    sent.append(rec.executor_id)
                except ConnectionError:
                    pass
        return sent

    def stats(self, now_ms=None) -> DispatcherStats:
        if now_ms is None:
            now_ms = monotonic_ms()
        comp = self._completions
        while comp and comp[0] <= now_ms - THROUGHPUT_WINDOW_MS:
            comp.popleft()
        live = list(self.executors.values())
        c = self.counts
        return DispatcherStats(
            submitted=c["submitted"],
            queued=len(self.queue),
            dispatched_running=c["running"],
            completed_ok=c["completed_ok"],
            failed_app=c["failed_app"],
            failed_system=c["failed_system"],
            rescheduled=c["rescheduled"],
            current_throughput_tasks_per_s=len(comp) * 1000.0 / THROUGHPUT_WINDOW_MS,
            registered_executors=len(live),
            suspended_executors=sum(r.state is ExecState.SUSPENDED for r in live),
            total_slots=sum(r.slots for r in live if r.state is not ExecState.SUSPENDED),
        )


# ---------------------------------------------------------------------------
# asyncio server


class _Connection(asyncio.Protocol):
    def __init__(self, server):
        self.server = server
        self.decoder = P.FrameDecoder()
        self.transport = None
        self.executor_id = None
        self.departing = False

    def connection_made(self, transport):
        self.transport = transport

    def send(self, msg):
        if self.transport is None or self.transport.is_closing():
            raise ConnectionError("connection closed")
        self.transport.write(P.encode(msg))

    def data_received(self, data):
        try:
            messages = self.decoder.feed(data)
        except P.ProtocolError as exc:
            log.warning("protocol error from %s: %s", self.transport.get_extra_info("peername"), exc)
            self.transport.abort()
            return
        server = self.server
        core = server.core
        now = monotonic_ms()
        for msg in messages:
            kind = msg.kind
            if kind is Kind.TASK_RESULT:
                core.handle_result(TaskResult.from_dict(msg.payload["result"]), now)
            elif kind is Kind.HEARTBEAT:
                if self.executor_id:
                    core.heartbeat(self.executor_id, now)
            elif kind is Kind.SUBMIT:
                self.send(core.submit(msg.payload["tasks"], self, now))
            elif kind is Kind.REGISTER:
                reply = core.register_executor(msg.payload, self, now)
                self.send(reply)
                if reply.kind is Kind.ERROR:
                    self.transport.close()
                    return
                self.executor_id = reply.payload["executor_id"]
                log.info("registered executor %s (%s, %d slots)", self.executor_id,
                         msg.payload["address"], msg.payload["slots"])
            elif kind is Kind.STATS_REQUEST:
                self.send(Message(Kind.STATS_REPLY, core.stats(now).to_dict()))
            elif kind is Kind.SHUTDOWN:
                if self.executor_id:
                    self.departing = True
                else:
                    core.shutdown_group(msg.payload.get("group"))
            else:
                self.send(P.error("unexpected", f"unexpected {kind.name}"))
        core.schedule_step(now)

    def connection_lost(self, exc):
        self.transport = None
        if self.executor_id:
            core = self.server.core
            now = monotonic_ms()
            core.executor_lost(self.executor_id, now)
            core.schedule_step(now)


class DispatcherServer:
    def __init__(self, host="127.0.0.1", port=0, log_dir=None, **core_kwargs):
        self.host, self.port = host, port
        self.log_dir = log_dir
        self._log_file = None
        self._writer = None
        on_event = None
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
            self._log_file = open(os.path.join(log_dir, "events.csv"), "w", newline="")
            self._writer = csv.writer(self._log_file)
            self._writer.writerow(["task_id", "event", "timestamp_ms"])
            on_event = self._write_event
        self.core = DispatcherCore(on_event=on_event, **core_kwargs)
        self._server = None

    def _write_event(self, task_id, event, ts):
        self._writer.writerow([task_id, event, f"{ts:.3f}"])

    async def start(self):
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(lambda: _Connection(self), self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._liveness = asyncio.ensure_future(self._liveness_loop())
        return self

    async def _liveness_loop(self):
        while True:
            await asyncio.sleep(self.core.heartbeat_ms / 2000.0)
            now = monotonic_ms()
            if self.core.check_liveness(now):
                self.core.schedule_step(now)
            if self._log_file:
                self._log_file.flush()

    async def serve_forever(self):
        await self.start()
        try:
            await self._server.serve_forever()
        finally:
            self.close()

    def close(self):
        if self._server is not None:
            self._server.close()
            self._liveness.cancel()
        if self._log_file:
            self._log_file.close()
            self._log_file = None


class DispatcherProcess:
    """A dispatcher running as a child process (``python -m mtcd.dispatcher``)."""

    def __init__(self, host="127.0.0.1", port=0, log_dir=None, heartbeat_ms=HEARTBEAT_MS,
                 extra_args=()):
        cmd = [sys.executable, "-m", "mtcd.dispatcher", "serve", "--bind", f"{host}:{port}",
               "--heartbeat-ms", str(heartbeat_ms), *extra_args]
        if log_dir:
            cmd += ["--log-dir", str(log_dir)]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
        line = self.proc.stdout.readline().split()
        if len(line) != 2 or line[0] != "LISTENING":
            self.proc.kill()
            raise RuntimeError(f"dispatcher failed to start: {line!r}")
        self.address = line[1]

    def stop(self, timeout=5):
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self.proc.stdout.close()

    def kill(self):
        self.proc.kill()
        self.proc.wait()
        self.proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def build_parser(parser=None):
    parser = parser or argparse.ArgumentParser(prog="dispatcher", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="run a dispatcher")
    serve.add_argument("--bind", default="127.0.0.1:7070", help="HOST:PORT (port 0 = any)")
    serve.add_argument("--heartbeat-ms", type=int, default=HEARTBEAT_MS)
    serve.add_argument("--suspend-failures", type=int, default=SUSPEND_FAILURES)
    serve.add_argument("--suspend-window-ms", type=int, default=SUSPEND_WINDOW_MS)
    serve.add_argument("--retries", type=int, default=MAX_RETRIES,
                       help="upper bound on per-task retries")
    serve.add_argument("--log-dir", help="directory for events.csv")
    serve.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s dispatcher %(levelname)s %(message)s")
    host, port = P.parse_address(args.bind)
    server = DispatcherServer(host, port, log_dir=args.log_dir, heartbeat_ms=args.heartbeat_ms,
                              suspend_failures=args.suspend_failures,
                              suspend_window_ms=args.suspend_window_ms, max_retries=args.retries)

    async def run():
        await server.start()
        print(f"LISTENING {host}:{server.port}", flush=True)
        loop = asyncio.get_running_loop()
        stop = loop.create_future()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, stop.set_result, None)
        await stop
        server.close()

    asyncio.run(run())
    return 0


if __name__ == "__main__":
    sys.exit(main())
