import hashlib
import logging
import os
import socket
import threading
import time

import pytest

from mtcd import protocol as P
from mtcd.dispatcher import DispatcherProcess
from mtcd.executor import (BLOCK_BYTES, SPAWN_FAILED, Agent, Cache, StagingError, TaskRunner,
                           bulk_copy)
from mtcd.protocol import DataKind, DataRef, Kind, Message, TaskDescriptor, TaskStatus


def write(path, data):
    with open(path, "wb") as f:
        f.write(data)
    return str(path)


def sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class Counting:
    def __init__(self):
        self.blocks = 0

    def update(self, data):
        self.blocks += 1


# --- bulk_copy -------------------------------------------------------------------

def test_copy_empty(shm_dir):
    src = write(os.path.join(shm_dir, "a"), b"")
    assert bulk_copy(src, os.path.join(shm_dir, "b")) == 0
    assert os.path.getsize(os.path.join(shm_dir, "b")) == 0


def test_copy_one_mib_identical(shm_dir):
    src = write(os.path.join(shm_dir, "a"), os.urandom(1 << 20))
    dst = os.path.join(shm_dir, "b")
    assert bulk_copy(src, dst) == 1 << 20
    assert sha(src) == sha(dst)


def test_copy_block_boundary(shm_dir):
    data = os.urandom(BLOCK_BYTES + 1)
    src = write(os.path.join(shm_dir, "a"), data)
    counter = Counting()
    bulk_copy(src, os.path.join(shm_dir, "b"), hasher=counter)
    assert counter.blocks == 2
    with open(os.path.join(shm_dir, "b"), "rb") as f:
        assert f.read() == data


def test_copy_missing_source(shm_dir):
    with pytest.raises(StagingError):
        bulk_copy(os.path.join(shm_dir, "nope"), os.path.join(shm_dir, "b"))


# --- cache -------------------------------------------------------------------------

def test_static_hit_reuses_entry(shm_dir):
    src = write(os.path.join(shm_dir, "s"), b"x" * 1000)
    cache = Cache(os.path.join(shm_dir, "c"), 1 << 20)
    ref = DataRef("s", src, DataKind.STATIC)
    p1 = cache.get(ref)
    p2 = cache.get(ref)
    assert p1 == p2 and cache.copies == 1 and sha(p1) == sha(src)


def test_static_source_change_recopies(shm_dir):
    src = write(os.path.join(shm_dir, "s"), b"one")
    cache = Cache(os.path.join(shm_dir, "c"), 1 << 20)
    ref = DataRef("s", src, DataKind.STATIC)
    p1 = cache.get(ref)
    time.sleep(0.01)
    write(src, b"two!")
    p2 = cache.get(ref)
    assert p1 != p2 and cache.copies == 2
    with open(p2, "rb") as f:
        assert f.read() == b"two!"


def test_concurrent_static_requests_copy_once(shm_dir):
    src = write(os.path.join(shm_dir, "s"), os.urandom(4 << 20))
    cache = Cache(os.path.join(shm_dir, "c"), 1 << 30)
    ref = DataRef("s", src, DataKind.STATIC)
    barrier = threading.Barrier(8)
    paths = []

    def go():
        barrier.wait()
        paths.append(cache.get(ref))

    threads = [threading.Thread(target=go) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache.copies == 1 and len(set(paths)) == 1


def test_dynamic_copied_per_request(shm_dir):
    src = write(os.path.join(shm_dir, "d"), b"data")
    cache = Cache(os.path.join(shm_dir, "c"), 1 << 20)
    ref = DataRef("d", src, DataKind.DYNAMIC)
    cache.get(ref, dest=os.path.join(shm_dir, "d1"), task_id="a")
    cache.get(ref, dest=os.path.join(shm_dir, "d2"), task_id="b")
    assert cache.copies == 2
    cache.drop_dynamic("a")
    assert not os.path.exists(os.path.join(shm_dir, "d1"))
    assert os.path.exists(os.path.join(shm_dir, "d2"))


def test_lru_eviction_skips_pinned(shm_dir):
    cache = Cache(os.path.join(shm_dir, "c"), 3000)
    refs = [DataRef(f"f{i}", write(os.path.join(shm_dir, f"f{i}"), bytes([i]) * 1000),
                    DataKind.STATIC) for i in range(4)]
    paths = [cache.get(r) for r in refs[:3]]
    cache.release(paths[1])
    cache.release(paths[2])
    # f0 is oldest but pinned; f1 is the LRU unpinned entry
    cache.get(refs[3])
    assert os.path.exists(paths[0]) and not os.path.exists(paths[1])
    assert os.path.exists(paths[2])
    assert cache.total_bytes <= cache.capacity_bytes


def test_lru_order_follows_use(shm_dir):
    cache = Cache(os.path.join(shm_dir, "c"), 2000)
    refs = [DataRef(f"f{i}", write(os.path.join(shm_dir, f"f{i}"), bytes([i]) * 1000),
                    DataKind.STATIC) for i in range(3)]
    a = cache.get(refs[0])
    b = cache.get(refs[1])
    cache.release(cache.get(refs[0]))  # touch f0
    cache.release(a)
    cache.release(b)
    cache.get(refs[2])
    assert os.path.exists(a) and not os.path.exists(b)


def test_too_large_for_cache(shm_dir):
    cache = Cache(os.path.join(shm_dir, "c"), 10)
    ref = DataRef("big", write(os.path.join(shm_dir, "big"), b"x" * 100), DataKind.STATIC)
    with pytest.raises(StagingError):
        cache.get(ref)


def test_missing_source_is_staging_error(shm_dir):
    cache = Cache(os.path.join(shm_dir, "c"), 1000)
    with pytest.raises(StagingError):
        cache.get(DataRef("x", os.path.join(shm_dir, "missing"), DataKind.STATIC))


# --- task runner -----------------------------------------------------------------------

@pytest.fixture
def runner(shm_dir):
    return TaskRunner(os.path.join(shm_dir, "node"), 1 << 26, executor_id="e-test")


def test_true_succeeds(runner):
    r = runner.execute(TaskDescriptor("t", "/bin/true"))
    assert r.status is TaskStatus.SUCCESS and r.exit_code == 0
    r.check()


def test_sleep0_latency_is_milliseconds(runner):
    runner.execute(TaskDescriptor("warm", "/bin/sleep", ["0"]))
    r = runner.execute(TaskDescriptor("t", "/bin/sleep", ["0"]))
    assert r.t_finished - r.t_dispatched < 100


def test_exit_code_is_app_failure(runner):
    r = runner.execute(TaskDescriptor("t", "/bin/sh", ["-c", "exit 3"]))
    assert r.status is TaskStatus.APP_FAILURE and r.exit_code == 3


def test_missing_executable(runner):
    r = runner.execute(TaskDescriptor("t", "/no/such/binary"))
    assert r.status is TaskStatus.APP_FAILURE and r.exit_code == SPAWN_FAILED


def test_timeout_kills_process_tree(runner, shm_dir):
    marker = os.path.join(shm_dir, "late")
    t0 = time.monotonic()
    r = runner.execute(TaskDescriptor("t", "/bin/sh", ["-c", f"(sleep 3; touch {marker}) & sleep 30"],
                                      wall_time_limit_s=1))
    assert r.status is TaskStatus.TIMEOUT
    assert time.monotonic() - t0 < 5
    time.sleep(3)
    assert not os.path.exists(marker)


def test_sandbox_env_and_staging(runner, shm_dir):
    static = write(os.path.join(shm_dir, "lib.dat"), b"static-bytes")
    dyn = write(os.path.join(shm_dir, "in.txt"), b"dynamic-bytes")
    out = os.path.join(shm_dir, "result.txt")
    script = ("test \"$(cat lib.dat)\" = static-bytes && test \"$(cat in.txt)\" = dynamic-bytes"
              " && test \"$MTCD_TASK_ID\" = job7 && test \"$TMPDIR\" = \"$PWD\""
              " && basename \"$PWD\" > result.txt")
    d = TaskDescriptor("job7", "/bin/sh", ["-c", script],
                       static_inputs=[DataRef("lib.dat", static, DataKind.STATIC)],
                       dynamic_inputs=[DataRef("in.txt", dyn)],
                       outputs=[DataRef("result.txt", out)])
    r = runner.execute(d)
    assert r.status is TaskStatus.SUCCESS, r.detail
    with open(out) as f:
        assert f.read().strip() == "job7"
    assert not os.path.exists(os.path.join(runner.tasks_dir, "job7"))
    assert [e.kind for e in runner.cache.entries()] == [DataKind.STATIC]


def test_input_list_decides_staging_kind(runner, shm_dir):
    src = write(os.path.join(shm_dir, "db"), b"db")
    d = TaskDescriptor("k1", "/bin/sh", ["-c", "test -L db && test -f x && test ! -L x"],
                       static_inputs=[DataRef("db", src)],  # kind left at its default
                       dynamic_inputs=[DataRef("x", src, DataKind.STATIC)])
    r = runner.execute(d)
    assert r.status is TaskStatus.SUCCESS, r.detail
    assert [e.kind for e in runner.cache.entries()] == [DataKind.STATIC]


def test_failed_task_does_not_persist_outputs(runner, shm_dir):
    out = os.path.join(shm_dir, "o")
    d = TaskDescriptor("t", "/bin/sh", ["-c", "echo hi > o; exit 1"], outputs=[DataRef("o", out)])
    assert runner.execute(d).status is TaskStatus.APP_FAILURE
    assert not os.path.exists(out)


def test_missing_static_input_is_system_failure(runner, shm_dir):
    d = TaskDescriptor("t", "/bin/true", static_inputs=[
        DataRef("x", os.path.join(shm_dir, "missing"), DataKind.STATIC)])
    r = runner.execute(d)
    assert r.status is TaskStatus.SYSTEM_FAILURE


def test_stdio_capture(runner):
    d = TaskDescriptor("t", "/bin/sh", ["-c", "echo out; echo err >&2"], capture_stdout=True,
                       capture_stderr=True)
    r = runner.execute(d)
    with open(r.stdout_ref.source_uri) as f:
        assert f.read() == "out\n"
    with open(r.stderr_ref.source_uri) as f:
        assert f.read() == "err\n"


def test_concurrent_tasks_use_distinct_sandboxes(runner):
    seen = []

    def go(i):
        r = runner.execute(TaskDescriptor(f"c{i}", "/bin/sh", ["-c", "pwd; sleep 0.2"],
                                          capture_stdout=True))
        with open(r.stdout_ref.source_uri) as f:
            seen.append(f.read().strip())

    threads = [threading.Thread(target=go, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(seen)) == 4


# --- agent ---------------------------------------------------------------------------

def start_agent(address, shm_dir, slots=1, **kw):
    registered = threading.Event()
    agent = Agent(address, slots, os.path.join(shm_dir, f"a{slots}"), 1 << 26,
                  on_registered=lambda eid: registered.set(), **kw)
    thread = threading.Thread(target=agent.run, daemon=True)
    thread.start()
    assert registered.wait(10)
    return agent, thread


def submit(address, descs):
    sock = socket.create_connection(P.parse_address(address))
    sock.sendall(P.encode(P.submit(descs)))
    assert P.decode(sock).kind is Kind.SUBMIT_ACK
    return sock


def collect(sock, n):
    return [P.decode(sock).payload["result"] for _ in range(n)]


def test_slot_bound_serializes(shm_dir):
    with DispatcherProcess() as d:
        agent, thread = start_agent(d.address, shm_dir, slots=1)
        sock = submit(d.address, [TaskDescriptor(f"s{i}", "/bin/sleep", ["0.3"]) for i in range(2)])
        a, b = sorted(collect(sock, 2), key=lambda r: r["t_started"])
        assert b["t_started"] >= a["t_finished"]
        sock.close()
        agent.stop()
        thread.join(5)


def test_suspend_finishes_running_task_then_refuses(shm_dir):
    with DispatcherProcess(extra_args=["--suspend-failures", "1", "--retries", "0"]) as d:
        agent, thread = start_agent(d.address, shm_dir, slots=2)
        sock = submit(d.address, [TaskDescriptor("long", "/bin/sleep", ["1"]),
                                  TaskDescriptor("bad", "/bin/true", static_inputs=[
                                      DataRef("x", "/nonexistent/input", DataKind.STATIC)])])
        got = {r["task_id"]: r for r in collect(sock, 2)}
        assert got["bad"]["status"] == "system_failure"
        assert got["long"]["status"] == "success"
        assert agent.suspended
        sock.sendall(P.encode(Message(Kind.STATS_REQUEST)))
        stats = P.decode(sock).payload
        assert stats["suspended_executors"] == 1 and stats["total_slots"] == 0
        sock.close()
        agent.stop()
        thread.join(5)


def test_shutdown_stops_agent(shm_dir):
    with DispatcherProcess() as d:
        agent, thread = start_agent(d.address, shm_dir, group="g")
        with socket.create_connection(P.parse_address(d.address)) as s:
            s.sendall(P.encode(Message(Kind.SHUTDOWN, {"group": "g"})))
        thread.join(5)
        assert not thread.is_alive()


def test_reconnects_with_backoff_after_dispatcher_death(shm_dir, caplog):
    caplog.set_level(logging.WARNING, logger="mtcd.executor")
    d = DispatcherProcess()
    host, port = P.parse_address(d.address)
    registrations = []
    agent = Agent(d.address, 1, os.path.join(shm_dir, "a"), 1 << 26, backoff_base_s=0.2,
                  backoff_cap_s=1.0, on_registered=registrations.append)
    thread = threading.Thread(target=agent.run, daemon=True)
    thread.start()
    try:
        deadline = time.monotonic() + 10
        while not registrations:
            assert time.monotonic() < deadline
            time.sleep(0.02)
        d.kill()
        time.sleep(0.8)
        d = DispatcherProcess(port=port)
        deadline = time.monotonic() + 10
        while len(registrations) < 2:
            assert time.monotonic() < deadline
            time.sleep(0.02)
        with socket.create_connection((host, port)) as s:
            s.sendall(P.encode(Message(Kind.STATS_REQUEST)))
            assert P.decode(s).payload["registered_executors"] == 1
    finally:
        agent.stop()
        thread.join(5)
        d.stop()
    delays = [r.getMessage() for r in caplog.records if "reconnect attempt" in r.getMessage()]
    assert delays[:3] == ["reconnect attempt 1 in 0.2 s", "reconnect attempt 2 in 0.4 s",
                          "reconnect attempt 3 in 0.8 s"]
