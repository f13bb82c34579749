import csv
import itertools
import os
import socket
import time

import pytest

from mtcd import protocol as P
from mtcd.dispatcher import (DispatcherCore, DispatcherProcess, DispatcherStats, ExecState,
                             HEARTBEAT_MS)
from mtcd.protocol import Kind, Message, TaskDescriptor, TaskResult, TaskStatus


class Conn:
    def __init__(self, fail=False):
        self.sent = []
        self.fail = fail

    def send(self, msg):
        if self.fail:
            raise ConnectionError("gone")
        self.sent.append(msg)

    def of(self, kind):
        return [m for m in self.sent if m.kind is kind]


_addresses = itertools.count()


def hello(slots=1, address=None, version=P.PROTOCOL_VERSION, group=None):
    return {"version": version, "slots": slots, "address": address or f"h{next(_addresses)}",
            "group": group}


def tasks(n, prefix="t", retries=3):
    return [TaskDescriptor(f"{prefix}{i}", "/bin/true", retries_remaining=retries)
            for i in range(n)]


def register(core, slots=1, now=0.0, address=None, conn=None):
    conn = conn or Conn()
    ack = core.register_executor(hello(slots, address), conn, now)
    assert ack.kind is Kind.REGISTER_ACK
    return ack.payload["executor_id"], conn


def result_for(msg, executor_id, status=TaskStatus.SUCCESS, code=0, t=0.0):
    p = msg.payload
    return TaskResult(p["task"]["task_id"], code, status, executor_id, p["t_submitted"],
                      p["t_dispatched"], t, t)


def conserved(core):
    s = core.stats(0)
    assert s.submitted == (s.queued + s.dispatched_running + s.completed_ok + s.failed_app
                           + s.failed_system)
    return s


# --- registration -------------------------------------------------------------

def test_first_registration():
    core = DispatcherCore()
    eid, _ = register(core, slots=4)
    s = core.stats(0)
    assert s.registered_executors == 1 and s.total_slots == 4
    ack = core.register_executor(hello(2), Conn(), 0)
    assert ack.payload["heartbeat_interval_ms"] == HEARTBEAT_MS


def test_one_pset_of_single_core_executors():
    core = DispatcherCore()
    for k in range(256):
        register(core, 1, now=k)
    assert core.stats(0).total_slots == 256


def test_version_mismatch_is_error():
    core = DispatcherCore()
    reply = core.register_executor(hello(version=99), Conn(), 0)
    assert reply.kind is Kind.ERROR and core.executors == {}
    assert core.register_executor(hello(slots=0), Conn(), 0).kind is Kind.ERROR


def test_reregistration_retires_old_record_and_requeues():
    core = DispatcherCore()
    old, conn = register(core, 2, address="node1:1")
    core.submit(tasks(2), Conn(), 0)
    core.schedule_step(1)
    assert core.stats(1).dispatched_running == 2
    new, conn2 = register(core, 2, now=5, address="node1:1")
    assert old not in core.executors and new in core.executors
    s = core.stats(5)
    assert s.queued == 2 and s.rescheduled == 2 and s.registered_executors == 1
    assert len(core.schedule_step(6)) == 2
    assert len(conn2.of(Kind.TASK_DISPATCH)) == 2


# --- submit -------------------------------------------------------------------

def test_empty_batch():
    ack = DispatcherCore().submit([], Conn(), 0)
    assert ack.payload == {"accepted": [], "rejected": []}


def test_batch_of_1024_is_queued():
    core = DispatcherCore()
    core.submit(tasks(1024), Conn(), 0)
    assert core.stats(0).queued == 1024


def test_duplicate_ids_rejected():
    core = DispatcherCore()
    eid, ex = register(core)
    owner = Conn()
    core.submit(tasks(1), owner, 0)
    core.schedule_step(0)
    core.handle_result(result_for(ex.sent[-1], eid), 1)
    ack = core.submit(tasks(2), owner, 2)
    assert ack.payload["accepted"] == ["t1"]
    assert ack.payload["rejected"] == [{"task_id": "t0", "reason": "duplicate task_id"}]
    ack = core.submit([{"task_id": "x"}], owner, 3)
    assert ack.payload["rejected"][0]["task_id"] == "x"


# --- scheduling ---------------------------------------------------------------

def test_one_task_one_executor():
    core = DispatcherCore()
    eid, _ = register(core, 4)
    core.submit(tasks(1), Conn(), 0)
    assert core.schedule_step(1) == [("t0", eid)]
    assert core.executors[eid].busy_slots == 1


def test_capacity_bounds_assignments():
    core = DispatcherCore()
    register(core, 4, now=0)
    register(core, 4, now=1)
    core.submit(tasks(10), Conn(), 0)
    assert len(core.schedule_step(2)) == 8
    assert core.stats(2).queued == 2
    for rec in core.executors.values():
        assert rec.busy_slots <= rec.slots


def test_fifo_and_earliest_registration_preference():
    core = DispatcherCore()
    late, _ = register(core, 2, now=10)
    early, _ = register(core, 2, now=5)
    core.submit(tasks(3), Conn(), 20)
    got = core.schedule_step(20)
    assert got == [("t0", early), ("t1", early), ("t2", late)]


def test_registration_tie_breaks_on_id():
    core = DispatcherCore()
    a, _ = register(core, 1, now=0)
    b, _ = register(core, 1, now=0)
    core.submit(tasks(1), Conn(), 0)
    assert core.schedule_step(0) == [("t0", min(a, b))]


def test_suspended_executors_get_nothing():
    core = DispatcherCore()
    eid, _ = register(core, 4)
    core.executors[eid].state = ExecState.SUSPENDED
    core.submit(tasks(3), Conn(), 0)
    assert core.schedule_step(0) == []
    assert core.stats(0).queued == 3


def test_send_failure_marks_dead_and_keeps_task_at_head():
    core = DispatcherCore()
    bad, _ = register(core, 1, now=0, conn=Conn(fail=True))
    good, gconn = register(core, 1, now=1)
    core.submit(tasks(2), Conn(), 2)
    assert core.schedule_step(2) == [("t0", good)]
    assert bad not in core.executors
    assert list(core.queue) == ["t1"]


# --- results ------------------------------------------------------------------

def test_success_notifies_owner():
    core = DispatcherCore()
    eid, ex = register(core)
    owner = Conn()
    core.submit(tasks(1), owner, 0)
    core.schedule_step(1)
    core.handle_result(result_for(ex.sent[-1], eid, t=2), 3)
    s = conserved(core)
    assert s.completed_ok == 1 and core.executors[eid].busy_slots == 0
    (note,) = owner.of(Kind.RESULT_NOTIFY)
    assert note.payload["result"]["task_id"] == "t0"


def test_app_failure_not_rescheduled():
    core = DispatcherCore()
    eid, ex = register(core)
    owner = Conn()
    core.submit(tasks(1), owner, 0)
    core.schedule_step(0)
    core.handle_result(result_for(ex.sent[-1], eid, TaskStatus.APP_FAILURE, 1), 1)
    s = conserved(core)
    assert s.failed_app == 1 and s.rescheduled == 0 and s.queued == 0
    assert owner.of(Kind.RESULT_NOTIFY)[0].payload["result"]["status"] == "app_failure"


def test_system_failure_requeued_at_tail_with_decrement():
    core = DispatcherCore()
    eid, ex = register(core)
    core.submit(tasks(2, retries=2), Conn(), 0)
    core.schedule_step(0)
    core.handle_result(result_for(ex.sent[-1], eid, TaskStatus.SYSTEM_FAILURE, -1), 1)
    assert list(core.queue) == ["t1", "t0"]
    assert core.stats(1).rescheduled == 1
    core.schedule_step(2)  # t1
    core.handle_result(result_for(ex.sent[-1], eid), 3)
    core.schedule_step(4)  # t0 again
    assert ex.sent[-1].payload["task"]["retries_remaining"] == 1


def test_retry_bound():
    core = DispatcherCore(suspend_failures=100)
    eid, ex = register(core)
    owner = Conn()
    core.submit(tasks(1, retries=2), owner, 0)
    dispatches = 0
    for step in range(10):
        if core.schedule_step(step):
            dispatches += 1
            core.handle_result(result_for(ex.sent[-1], eid, TaskStatus.TIMEOUT, -9), step)
    assert dispatches == 3
    s = conserved(core)
    assert s.failed_system == 1 and s.rescheduled == 2
    assert owner.of(Kind.RESULT_NOTIFY)[0].payload["result"]["status"] == "timeout"


def test_retries_capped_by_dispatcher_setting():
    core = DispatcherCore(max_retries=1, suspend_failures=100)
    eid, ex = register(core)
    core.submit(tasks(1, retries=5), Conn(), 0)
    n = 0
    for step in range(10):
        if core.schedule_step(step):
            n += 1
            core.handle_result(result_for(ex.sent[-1], eid, TaskStatus.SYSTEM_FAILURE, -1), step)
    assert n == 2


def test_duplicate_and_late_results_discarded():
    core = DispatcherCore()
    eid, ex = register(core)
    owner = Conn()
    core.submit(tasks(1), owner, 0)
    core.schedule_step(0)
    res = result_for(ex.sent[-1], eid)
    core.handle_result(res, 1)
    before = core.stats(1)
    core.handle_result(res, 2)
    core.handle_result(TaskResult("nope", 0, TaskStatus.SUCCESS, eid, 0, 0, 0, 0), 2)
    assert core.stats(2) == before
    assert len(owner.of(Kind.RESULT_NOTIFY)) == 1


# --- liveness ------------------------------------------------------------------

def test_recent_heartbeat_keeps_executor():
    core = DispatcherCore()
    eid, _ = register(core)
    core.heartbeat(eid, 10_000)
    assert core.check_liveness(10_000 + HEARTBEAT_MS) == []


def test_missed_heartbeats_requeue_running_tasks():
    core = DispatcherCore()
    eid, ex = register(core, 2)
    owner = Conn()
    core.submit(tasks(2), owner, 0)
    core.schedule_step(0)
    assert core.check_liveness(3 * HEARTBEAT_MS) == []  # exactly 3 intervals: still alive
    assert core.check_liveness(3.5 * HEARTBEAT_MS) == [eid]
    s = conserved(core)
    assert s.queued == 2 and s.rescheduled == 2 and s.registered_executors == 0
    # the dead executor's late result is ignored
    core.handle_result(result_for(ex.sent[0], eid), 3.6 * HEARTBEAT_MS)
    assert core.stats(0).completed_ok == 0


# --- suspension -------------------------------------------------------------------

def fail_at(core, eid, ex, times):
    for t in times:
        core.schedule_step(t)
        core.handle_result(result_for(ex.sent[-1], eid, TaskStatus.SYSTEM_FAILURE, -1), t)


def test_two_failures_do_not_suspend():
    core = DispatcherCore()
    eid, ex = register(core)
    core.submit(tasks(5), Conn(), 0)
    fail_at(core, eid, ex, [0, 1000])
    assert core.executors[eid].state is not ExecState.SUSPENDED


def test_three_failures_within_59s_suspend():
    core = DispatcherCore()
    eid, ex = register(core)
    core.submit(tasks(5), Conn(), 0)
    fail_at(core, eid, ex, [0, 30_000, 59_000])
    rec = core.executors[eid]
    assert rec.state is ExecState.SUSPENDED
    assert ex.of(Kind.SUSPEND)
    assert core.schedule_step(60_000) == []
    assert core.stats(60_000).suspended_executors == 1


def test_three_failures_over_61s_do_not_suspend():
    core = DispatcherCore()
    eid, ex = register(core)
    core.submit(tasks(5), Conn(), 0)
    fail_at(core, eid, ex, [0, 30_000, 61_000])
    assert core.executors[eid].state is not ExecState.SUSPENDED
    assert not ex.of(Kind.SUSPEND)


def test_window_edge_is_inclusive():
    core = DispatcherCore()
    eid, ex = register(core)
    core.submit(tasks(5), Conn(), 0)
    fail_at(core, eid, ex, [0, 1, 60_000])
    assert core.executors[eid].state is ExecState.SUSPENDED


# --- stats ----------------------------------------------------------------------

def test_fresh_stats_are_zero():
    assert DispatcherCore().stats(0) == DispatcherStats()


def test_stats_after_scripted_workload():
    core = DispatcherCore()
    eid, ex = register(core, 100)
    core.submit(tasks(100), Conn(), 0)
    core.schedule_step(0)
    for msg in ex.of(Kind.TASK_DISPATCH)[:60]:
        core.handle_result(result_for(msg, eid), 10)
    s = conserved(core)
    assert s.submitted == 100 and s.completed_ok == 60
    assert s.queued + s.dispatched_running == 40


def test_throughput_window():
    core = DispatcherCore()
    eid, ex = register(core, 500)
    core.submit(tasks(500), Conn(), 0)
    core.schedule_step(0)
    for i, msg in enumerate(ex.of(Kind.TASK_DISPATCH)):
        core.handle_result(result_for(msg, eid), 1000 + i * 2)
    assert core.stats(1999).current_throughput_tasks_per_s == 500


def test_stats_reply_mirrors_stats_fields():
    payload = DispatcherStats().to_dict()
    assert set(payload) == set(P.REQUIRED[Kind.STATS_REPLY])
    P.encode(Message(Kind.STATS_REPLY, payload))


def test_shutdown_group_targets_members():
    core = DispatcherCore()
    a = Conn()
    b = Conn()
    core.register_executor(hello(1, "x", group="g1"), a, 0)
    core.register_executor(hello(1, "y", group="g2"), b, 0)
    assert len(core.shutdown_group("g1")) == 1
    assert a.of(Kind.SHUTDOWN) and not b.of(Kind.SHUTDOWN)


# --- server -----------------------------------------------------------------------

def rpc(sock, msg):
    sock.sendall(P.encode(msg))
    return P.decode(sock)


def test_server_stats_and_submit(tmp_path):
    with DispatcherProcess(log_dir=tmp_path) as d:
        with socket.create_connection(P.parse_address(d.address)) as s:
            reply = rpc(s, Message(Kind.STATS_REQUEST))
            assert reply.kind is Kind.STATS_REPLY and reply.payload["submitted"] == 0
            ack = rpc(s, P.submit(tasks(3)))
            assert ack.payload["accepted"] == ["t0", "t1", "t2"]
            assert rpc(s, Message(Kind.STATS_REQUEST)).payload["queued"] == 3
            # executor registers over the wire and receives work
            with socket.create_connection(P.parse_address(d.address)) as ex:
                ack = rpc(ex, P.register(2, "wire:1"))
                eid = ack.payload["executor_id"]
                got = [P.decode(ex), P.decode(ex)]
                assert all(m.kind is Kind.TASK_DISPATCH for m in got)
                for m in got:
                    ex.sendall(P.encode(P.task_result(result_for(m, eid, t=m.payload["t_dispatched"]))))
                notes = [P.decode(s), P.decode(s)]
                assert {n.payload["result"]["task_id"] for n in notes} == {"t0", "t1"}
        time.sleep(0.1)
    with open(os.path.join(tmp_path, "events.csv")) as f:
        rows = list(csv.DictReader(f))
    assert {r["event"] for r in rows} >= {"submitted", "dispatched", "started", "finished"}
    assert list(rows[0]) == ["task_id", "event", "timestamp_ms"]


def test_server_rejects_bad_version():
    with DispatcherProcess() as d:
        with socket.create_connection(P.parse_address(d.address)) as s:
            reply = rpc(s, P.register(1, "x", version=0))
            assert reply.kind is Kind.ERROR
            assert s.recv(1) == b""


def test_cli_help():
    from mtcd.dispatcher import build_parser
    args = build_parser().parse_args(["serve", "--bind", "0.0.0.0:9", "--retries", "2"])
    assert args.retries == 2 and args.heartbeat_ms == 5000 and args.suspend_window_ms == 60000
