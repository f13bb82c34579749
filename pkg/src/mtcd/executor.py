"""Executor agent: stages data through a local cache and forks one process per task.

The cache directory plays the role of a compute node's ramdisk; point it at
a tmpfs (``/dev/shm/...``) for the same effect on a workstation.  Layout::

    <cache_dir>/static/<key>          cached static inputs (read-only)
    <cache_dir>/tasks/<task_id>/      per-task sandbox, removed when the task ends
    <cache_dir>/stdio/<task_id>.out   captured stdout/stderr
"""

import argparse
import hashlib
import logging
import os
import queue
import select
import shutil
import signal
import socket
import subprocess
import sys
import threading
import time
import uuid
from collections import OrderedDict
from concurrent.futures import Future
from dataclasses import dataclass, replace
from typing import Optional

from . import protocol as P
from .protocol import DataKind, DataRef, Kind, Message, TaskDescriptor, TaskResult, TaskStatus

log = logging.getLogger(__name__)

BLOCK_BYTES = 131072
SPAWN_FAILED = -127
SYSTEM_FAILED = -1
BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 30.0


class StagingError(Exception):
    """Input staging or output persistence failed; the task may be retried."""


def bulk_copy(src, dst, block_bytes=BLOCK_BYTES, hasher=None) -> int:
    """Copy ``src`` to ``dst`` in fixed-size blocks; return bytes copied.

    If ``hasher`` is given, each block is fed to ``hasher.update``.
    """
    buf = bytearray(block_bytes)
    view = memoryview(buf)
    total = 0
    try:
        with open(src, "rb", buffering=0) as fin, open(dst, "wb", buffering=0) as fout:
            expected = os.fstat(fin.fileno()).st_size
            while True:
                n = fin.readinto(buf)
                if not n:
                    break
                chunk = view[:n]
                if hasher is not None:
                    hasher.update(chunk)
                written = 0
                while written < n:
                    w = fout.write(chunk[written:])
                    if not w:
                        raise StagingError(f"short write to {dst}")
                    written += w
                total += n
    except OSError as exc:
        raise StagingError(f"copy {src} -> {dst} failed: {exc}") from exc
    if total != expected:
        raise StagingError(f"short read from {src}: {total} of {expected} bytes")
    return total


@dataclass
class CacheEntry:
    key: str
    local_path: str
    kind: DataKind
    size_bytes: int
    last_used_ms: float
    pins: int = 0
    owner: Optional[str] = None  # task id, dynamic entries only


class Cache:
    """Node-local data cache with per-key in-flight deduplication.

    Static entries are keyed by a digest of (source_uri, content sha256) and
    reused across tasks.  A source's content hash is remembered against its
    stat fingerprint (size, mtime, inode) so a warm lookup does not re-read
    the source; a changed fingerprint forces a fresh copy.
    """

    def __init__(self, root, capacity_bytes):
        self.root = os.path.abspath(root)
        self.capacity_bytes = capacity_bytes
        self.static_dir = os.path.join(self.root, "static")
        os.makedirs(self.static_dir, exist_ok=True)
        self._lock = threading.Lock()
        self._static = OrderedDict()  # key -> CacheEntry, LRU first
        self._dynamic = {}  # id -> CacheEntry
        self._by_fingerprint = {}  # (uri, size, mtime_ns, ino) -> key
        self._inflight = {}  # fingerprint -> Future
        self.total_bytes = 0
        self.copies = 0

    def get(self, ref: DataRef, dest=None, task_id=None) -> str:
        """Return a local path for ``ref``; the static entry is pinned until ``release``."""
        if ref.kind is DataKind.DYNAMIC:
            return self._get_dynamic(ref, dest, task_id)
        return self._get_static(ref)

    def _fingerprint(self, ref):
        try:
            st = os.stat(ref.source_uri)
        except OSError as exc:
            raise StagingError(f"source {ref.source_uri} unavailable: {exc}") from exc
        return (ref.source_uri, st.st_size, st.st_mtime_ns, st.st_ino)

    def _get_static(self, ref):
        fp = self._fingerprint(ref)
        while True:
            with self._lock:
                key = self._by_fingerprint.get(fp)
                entry = self._static.get(key) if key else None
                if entry is not None:
                    self._touch(entry)
                    return entry.local_path
                fut = self._inflight.get(fp)
                leader = fut is None
                if leader:
                    fut = self._inflight[fp] = Future()
            if not leader:
                fut.result()  # re-raises the leader's StagingError
                continue  # entry may have been evicted meanwhile; look again
            try:
                path = self._fill_static(ref, fp)
            except BaseException as exc:
                with self._lock:
                    del self._inflight[fp]
                fut.set_exception(exc)
                raise
            with self._lock:
                del self._inflight[fp]
            fut.set_result(path)
            return path

    def _touch(self, entry):
        entry.pins += 1
        entry.last_used_ms = time.monotonic() * 1000.0
        self._static.move_to_end(entry.key)

    def _fill_static(self, ref, fp):
        size = fp[1]
        with self._lock:
            self._reserve(size)
        tmp = os.path.join(self.static_dir, f".tmp-{uuid.uuid4().hex}")
        content = hashlib.sha256()
        try:
            n = bulk_copy(ref.source_uri, tmp, hasher=content)
            self.copies += 1
        except StagingError:
            with self._lock:
                self.total_bytes -= size
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        key = hashlib.sha256(f"{ref.source_uri}\0{content.hexdigest()}".encode()).hexdigest()
        path = os.path.join(self.static_dir, key)
        os.chmod(tmp, 0o444)
        with self._lock:
            self.total_bytes += n - size
            entry = self._static.get(key)
            if entry is not None:
                # same content under an older fingerprint (e.g. touched file)
                self.total_bytes -= n
                os.unlink(tmp)
            else:
                os.replace(tmp, path)
                entry = self._static[key] = CacheEntry(key, path, DataKind.STATIC, n, 0.0)
            self._by_fingerprint[fp] = key
            self._touch(entry)
        return path

    def _reserve(self, size):
        """Account ``size`` bytes, evicting unpinned static entries LRU-first. Holds lock."""
        if size > self.capacity_bytes:
            raise StagingError(f"{size} bytes exceeds cache capacity {self.capacity_bytes}")
        if self.total_bytes + size > self.capacity_bytes:
            for key in list(self._static):
                entry = self._static[key]
                if entry.pins:
                    continue
                self._evict(entry)
                if self.total_bytes + size <= self.capacity_bytes:
                    break
        if self.total_bytes + size > self.capacity_bytes:
            raise StagingError("cache full of pinned entries")
        self.total_bytes += size

    def _evict(self, entry):
        log.debug("evicting %s (%d bytes)", entry.key, entry.size_bytes)
        del self._static[entry.key]
        self._by_fingerprint = {fp: k for fp, k in self._by_fingerprint.items() if k != entry.key}
        self.total_bytes -= entry.size_bytes
        try:
            os.unlink(entry.local_path)
        except FileNotFoundError:
            pass

    def release(self, path):
        """Unpin a static entry previously returned by ``get``."""
        key = os.path.basename(path)
        with self._lock:
            entry = self._static.get(key)
            if entry is not None and entry.pins:
                entry.pins -= 1

    def _get_dynamic(self, ref, dest, task_id):
        if dest is None:
            raise ValueError("dynamic inputs need a destination path")
        size = self._fingerprint(ref)[1]
        with self._lock:
            self._reserve(size)
        try:
            n = bulk_copy(ref.source_uri, dest)
        except StagingError:
            with self._lock:
                self.total_bytes -= size
            raise
        self.copies += 1
        entry_id = uuid.uuid4().hex
        with self._lock:
            self.total_bytes += n - size
            self._dynamic[entry_id] = CacheEntry(entry_id, dest, DataKind.DYNAMIC, n,
                                                 time.monotonic() * 1000.0, owner=task_id)
        return dest

    def drop_dynamic(self, task_id):
        with self._lock:
            for entry_id, entry in list(self._dynamic.items()):
                if entry.owner == task_id:
                    del self._dynamic[entry_id]
                    self.total_bytes -= entry.size_bytes
                    try:
                        os.unlink(entry.local_path)
                    except FileNotFoundError:
                        pass

    def entries(self):
        with self._lock:
            return list(self._static.values()) + list(self._dynamic.values())


def _now_ms():
    return time.monotonic() * 1000.0


class TaskRunner:
    """Runs single tasks: stage, spawn, wait, persist outputs, clean up."""

    def __init__(self, cache_dir, cache_capacity_bytes=1 << 30, executor_id="local",
                 stdio_dir=None):
        self.cache_dir = os.path.abspath(cache_dir)
        self.cache = Cache(self.cache_dir, cache_capacity_bytes)
        self.tasks_dir = os.path.join(self.cache_dir, "tasks")
        self.stdio_dir = stdio_dir or os.path.join(self.cache_dir, "stdio")
        os.makedirs(self.tasks_dir, exist_ok=True)
        os.makedirs(self.stdio_dir, exist_ok=True)
        self.executor_id = executor_id
        self._procs = {}
        self._lock = threading.Lock()
        self._base_env = {k: os.environ[k] for k in ("PATH", "HOME", "LANG") if k in os.environ}

    def kill_all(self):
        with self._lock:
            procs = list(self._procs.values())
        for proc in procs:
            _kill_tree(proc)

    def execute(self, d: TaskDescriptor, t_submitted=None, t_dispatched=None) -> TaskResult:
        t_dispatched = _now_ms() if t_dispatched is None else t_dispatched
        t_submitted = t_dispatched if t_submitted is None else t_submitted
        sandbox = os.path.join(self.tasks_dir, d.task_id)
        pinned = []
        out_path = os.path.join(sandbox, ".stdout") if d.capture_stdout else None
        err_path = os.path.join(sandbox, ".stderr") if d.capture_stderr else None

        def result(status, code, started, detail="", out=None, err=None):
            return TaskResult(d.task_id, code, status, self.executor_id, t_submitted,
                              t_dispatched, started, _now_ms(), out, err,
                              wall_ms=time.time() * 1000.0, detail=detail)

        try:
            try:
                if os.path.lexists(sandbox):
                    shutil.rmtree(sandbox)
                os.mkdir(sandbox)
                for ref in d.static_inputs:
                    # the list a ref sits in decides how it is staged
                    if ref.kind is not DataKind.STATIC:
                        ref = replace(ref, kind=DataKind.STATIC)
                    path = self.cache.get(ref)
                    pinned.append(path)
                    os.symlink(path, os.path.join(sandbox, ref.logical_name))
                for ref in d.dynamic_inputs:
                    if ref.kind is not DataKind.DYNAMIC:
                        ref = replace(ref, kind=DataKind.DYNAMIC)
                    self.cache.get(ref, dest=os.path.join(sandbox, ref.logical_name),
                                   task_id=d.task_id)
            except (StagingError, OSError) as exc:
                log.warning("staging for %s failed: %s", d.task_id, exc)
                return result(TaskStatus.SYSTEM_FAILURE, SYSTEM_FAILED, _now_ms(), f"staging: {exc}")

            env = dict(self._base_env)
            env.update(d.env)
            env["MTCD_TASK_ID"] = d.task_id
            env["TMPDIR"] = sandbox
            t_started = _now_ms()
            try:
                with _open_or_devnull(out_path) as out, _open_or_devnull(err_path) as err:
                    proc = subprocess.Popen([d.executable, *d.args], cwd=sandbox, env=env,
                                            stdin=subprocess.DEVNULL, stdout=out, stderr=err,
                                            start_new_session=True)
            except OSError as exc:
                return result(TaskStatus.APP_FAILURE, SPAWN_FAILED, t_started, f"spawn: {exc}")
            with self._lock:
                self._procs[d.task_id] = proc
            try:
                code = _wait(proc, d.wall_time_limit_s)
                if code is None:
                    _kill_tree(proc)
                    code = proc.wait()
                    return result(TaskStatus.TIMEOUT, code if code else SYSTEM_FAILED, t_started,
                                  f"exceeded {d.wall_time_limit_s} s")
            finally:
                with self._lock:
                    self._procs.pop(d.task_id, None)

            try:
                out_ref = self._keep_stdio(d, out_path, "stdout")
                err_ref = self._keep_stdio(d, err_path, "stderr")
                if code == 0:
                    self._persist_outputs(d, sandbox)
            except (StagingError, OSError) as exc:
                log.warning("persisting outputs of %s failed: %s", d.task_id, exc)
                return result(TaskStatus.SYSTEM_FAILURE, SYSTEM_FAILED, t_started, f"outputs: {exc}")
            if code == 0:
                return result(TaskStatus.SUCCESS, 0, t_started, out=out_ref, err=err_ref)
            return result(TaskStatus.APP_FAILURE, code, t_started, out=out_ref, err=err_ref)
        finally:
            for path in pinned:
                self.cache.release(path)
            self.cache.drop_dynamic(d.task_id)
            if d.static_inputs or d.dynamic_inputs or d.outputs or out_path or err_path:
                shutil.rmtree(sandbox, ignore_errors=True)
            else:
                try:
                    os.rmdir(sandbox)
                except OSError:
                    shutil.rmtree(sandbox, ignore_errors=True)

    def _keep_stdio(self, d, path, name):
        if path is None:
            return None
        dst = os.path.join(self.stdio_dir, f"{d.task_id}.{name[3:]}")
        tmp = dst + ".part"
        bulk_copy(path, tmp)
        os.replace(tmp, dst)
        return DataRef(name, dst, DataKind.DYNAMIC, os.path.getsize(dst))

    def _persist_outputs(self, d, sandbox):
        for ref in d.outputs:
            src = os.path.join(sandbox, ref.logical_name)
            if not os.path.exists(src):
                log.warning("task %s did not produce output %s", d.task_id, ref.logical_name)
                continue
            tmp = f"{ref.source_uri}.part-{d.task_id}"
            bulk_copy(src, tmp)
            os.replace(tmp, ref.source_uri)


class _Devnull:
    def __enter__(self):
        return subprocess.DEVNULL

    def __exit__(self, *exc):
        return False


def _open_or_devnull(path):
    return open(path, "wb") if path else _Devnull()


def _wait(proc, timeout_s):
    """Blocking wait with a deadline; None on timeout.

    ``Popen.wait(timeout)`` polls with growing sleeps, which costs latency on
    millisecond tasks, so wait on a pidfd where the kernel provides one.
    """
    try:
        fd = os.pidfd_open(proc.pid)
    except (AttributeError, OSError):
        try:
            return proc.wait(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            return None
    try:
        poller = select.poll()
        poller.register(fd, select.POLLIN)
        if not poller.poll(timeout_s * 1000):
            return None
    finally:
        os.close(fd)
    return proc.wait()


def _kill_tree(proc):
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


class Agent:
    """Long-running executor: register, run dispatched tasks, heartbeat, reconnect."""

    def __init__(self, dispatcher_addr, slots=1, cache_dir=None, cache_capacity_bytes=1 << 30,
                 address=None, group=None, backoff_base_s=BACKOFF_BASE_S,
                 backoff_cap_s=BACKOFF_CAP_S, max_reconnects=None, on_registered=None):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.dispatcher = P.parse_address(dispatcher_addr) if isinstance(dispatcher_addr, str) \
            else tuple(dispatcher_addr)
        self.slots = slots
        self.address = address or f"{socket.gethostname()}:{os.getpid()}"
        self.group = group
        self.runner = TaskRunner(cache_dir or f"/dev/shm/mtcd-{os.getpid()}", cache_capacity_bytes)
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self.max_reconnects = max_reconnects
        self.on_registered = on_registered
        self.executor_id = None
        self.suspended = False
        self._stop = threading.Event()
        self._sock = None
        self._send_lock = threading.Lock()
        self._work = None
        self._running = 0
        self._generation = 0
        self.reconnects = 0

    # -- connection ------------------------------------------------------

    def _send(self, msg, generation):
        data = P.encode(msg)
        with self._send_lock:
            if generation != self._generation or self._sock is None:
                return False
            try:
                self._sock.sendall(data)
            except OSError:
                return False
        return True

    def run(self):
        """Serve until SHUTDOWN or ``stop()``; reconnect with backoff on connection loss."""
        self._work = queue.SimpleQueue()
        workers = [threading.Thread(target=self._worker, daemon=True, name=f"slot-{i}")
                   for i in range(self.slots)]
        for w in workers:
            w.start()
        attempt = 0
        try:
            while not self._stop.is_set():
                try:
                    self._session()
                    attempt = 0
                except (OSError, P.ProtocolError) as exc:
                    log.warning("connection to dispatcher %s:%d lost: %s", *self.dispatcher, exc)
                self._drop_connection()
                if self._stop.is_set():
                    break
                if self.max_reconnects is not None and attempt >= self.max_reconnects:
                    log.error("giving up after %d reconnect attempts", attempt)
                    break
                delay = min(self.backoff_cap_s, self.backoff_base_s * 2 ** attempt)
                attempt += 1
                self.reconnects += 1
                log.warning("reconnect attempt %d in %.1f s", attempt, delay)
                if self._stop.wait(delay):
                    break
        finally:
            self._stop.set()
            self._drop_connection()
            for _ in workers:
                self._work.put(None)

    def stop(self):
        self._stop.set()
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def _drop_connection(self):
        with self._send_lock:
            self._generation += 1
            sock, self._sock = self._sock, None
        if sock is not None:
            sock.close()
        # drain queued-but-unstarted work and kill running tasks
        try:
            while True:
                item = self._work.get_nowait()
                if item is None:
                    self._work.put(None)
                    break
        except queue.Empty:
            pass
        self.runner.kill_all()

    def _session(self):
        sock = socket.create_connection(self.dispatcher, timeout=10)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._send_lock:
            self._sock = sock
            generation = self._generation
        self._send(P.register(self.slots, self.address, self.group), generation)
        ack = P.decode(sock)
        if ack.kind is Kind.ERROR:
            self._stop.set()
            raise P.ProtocolError(f"registration refused: {ack.payload['message']}")
        if ack.kind is not Kind.REGISTER_ACK:
            raise P.ProtocolError(f"expected REGISTER_ACK, got {ack.kind.name}")
        self.executor_id = ack.payload["executor_id"]
        self.runner.executor_id = self.executor_id
        self.suspended = False
        interval = ack.payload["heartbeat_interval_ms"] / 1000.0
        log.info("registered as %s (heartbeat %.1f s)", self.executor_id, interval)
        if self.on_registered:
            self.on_registered(self.executor_id)
        threading.Thread(target=self._heartbeat, args=(interval, generation), daemon=True).start()

        decoder = P.FrameDecoder()
        while not self._stop.is_set():
            data = sock.recv(65536)
            if not data:
                raise P.ConnectionLost("dispatcher closed the connection")
            for msg in decoder.feed(data):
                if msg.kind is Kind.TASK_DISPATCH:
                    self._accept(msg.payload, generation)
                elif msg.kind is Kind.SUSPEND:
                    log.warning("suspended by dispatcher: %s", msg.payload.get("reason", ""))
                    self.suspended = True
                elif msg.kind is Kind.SHUTDOWN:
                    log.info("shutdown requested")
                    self._stop.set()
                    self.runner.kill_all()
                    return
                else:
                    log.warning("ignoring unexpected %s", msg.kind.name)

    def _accept(self, payload, generation):
        desc = TaskDescriptor.from_dict(payload["task"])
        if self.suspended:
            now = _now_ms()
            res = TaskResult(desc.task_id, SYSTEM_FAILED, TaskStatus.SYSTEM_FAILURE,
                             self.executor_id, payload["t_submitted"], payload["t_dispatched"],
                             now, now, detail="executor suspended")
            self._send(P.task_result(res), generation)
            return
        self._work.put((desc, payload["t_submitted"], payload["t_dispatched"], generation))

    def _worker(self):
        while True:
            item = self._work.get()
            if item is None:
                return
            desc, t_sub, t_disp, generation = item
            if generation != self._generation:
                continue
            res = self.runner.execute(desc, t_sub, t_disp)
            self._send(P.task_result(res), generation)

    def _heartbeat(self, interval, generation):
        while not self._stop.wait(interval):
            if not self._send(Message(Kind.HEARTBEAT, {"executor_id": self.executor_id}),
                              generation):
                return


def run_agent(dispatcher_addr, slots, cache_dir, cache_capacity_bytes, **kwargs):
    agent = Agent(dispatcher_addr, slots, cache_dir, cache_capacity_bytes, **kwargs)
    agent.run()
    return agent


def build_parser(parser=None):
    parser = parser or argparse.ArgumentParser(prog="executor", description=__doc__,
                                               formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an executor agent")
    run.add_argument("--dispatcher", required=True, help="HOST:PORT")
    run.add_argument("--slots", type=int, default=1)
    run.add_argument("--cache-dir", required=True)
    run.add_argument("--cache-capacity-bytes", type=int, default=1 << 30)
    run.add_argument("--address", help="stable agent identity (default host:pid)")
    run.add_argument("--group", help="allocation label used for group shutdown")
    run.add_argument("--announce", action="store_true",
                     help="print 'REGISTERED <id>' on stdout after each registration")
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s executor %(levelname)s %(message)s")

    def announce(executor_id):
        if args.announce:
            print(f"REGISTERED {executor_id}", flush=True)

    agent = Agent(args.dispatcher, args.slots, args.cache_dir, args.cache_capacity_bytes,
                  address=args.address, group=args.group, on_registered=announce)
    signal.signal(signal.SIGTERM, lambda *_: agent.stop())
    agent.run()


if __name__ == "__main__":
    main()
