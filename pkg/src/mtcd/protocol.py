"""Framed wire protocol shared by clients, dispatchers and executors.

Every frame on the wire is::

    [len: u32 big-endian][tag: u8][payload: UTF-8 canonical JSON]

where ``len`` counts the tag byte plus the payload.  Payloads are JSON
objects serialized with sorted keys and no insignificant whitespace, so a
given message always encodes to the same bytes.
"""

import enum
import json
import struct
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

PROTOCOL_VERSION = 1

HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 2**32 - 2


class ProtocolError(Exception):
    """Malformed frame or payload; the connection must be closed."""


class ConnectionLost(ProtocolError):
    """The byte stream ended before a complete frame was read."""


class FrameTooLarge(ProtocolError):
    pass


class Kind(enum.IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    TASK_DISPATCH = 3
    TASK_RESULT = 4
    HEARTBEAT = 5
    SUSPEND = 6
    SHUTDOWN = 7
    SUBMIT = 8
    SUBMIT_ACK = 9
    RESULT_NOTIFY = 10
    STATS_REQUEST = 11
    STATS_REPLY = 12
    ERROR = 13


_KINDS = {k.value: k for k in Kind}

# Keys a payload must carry for each kind.  Extra keys are allowed.
REQUIRED = {
    Kind.REGISTER: ("version", "slots", "address"),
    Kind.REGISTER_ACK: ("executor_id", "heartbeat_interval_ms"),
    Kind.TASK_DISPATCH: ("task", "t_submitted", "t_dispatched"),
    Kind.TASK_RESULT: ("result",),
    Kind.HEARTBEAT: ("executor_id",),
    Kind.SUSPEND: ("executor_id",),
    Kind.SHUTDOWN: (),
    Kind.SUBMIT: ("tasks",),
    Kind.SUBMIT_ACK: ("accepted", "rejected"),
    Kind.RESULT_NOTIFY: ("result",),
    Kind.STATS_REQUEST: (),
    Kind.STATS_REPLY: (
        "submitted", "queued", "dispatched_running", "completed_ok",
        "failed_app", "failed_system", "rescheduled",
        "current_throughput_tasks_per_s", "registered_executors",
        "suspended_executors", "total_slots",
    ),
    Kind.ERROR: ("code", "message"),
}


@dataclass
class Message:
    kind: Kind
    payload: Dict[str, Any] = field(default_factory=dict)


def _check(kind, payload):
    if not isinstance(payload, dict):
        raise ProtocolError(f"{kind.name} payload must be an object")
    missing = [k for k in REQUIRED[kind] if k not in payload]
    if missing:
        raise ProtocolError(f"{kind.name} payload missing {', '.join(missing)}")


def encode(msg: Message) -> bytes:
    kind = Kind(msg.kind)
    _check(kind, msg.payload)
    try:
        body = json.dumps(msg.payload, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"unserializable {kind.name} payload: {exc}") from exc
    if len(body) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(body)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(body) + 1, kind) + body


def _parse(tag, body):
    kind = _KINDS.get(tag)
    if kind is None:
        raise ProtocolError(f"unknown message tag {tag:#04x}")
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"undecodable {kind.name} payload: {exc}") from exc
    _check(kind, payload)
    return Message(kind, payload)


def _read_exactly(stream, n):
    chunks = []
    while n:
        if hasattr(stream, "recv"):
            chunk = stream.recv(n)
        else:
            chunk = stream.read(n)
        if not chunk:
            raise ConnectionLost("stream closed mid-frame" if chunks else "stream closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def decode(stream) -> Message:
    """Read exactly one frame from a socket or binary file-like object."""
    header = _read_exactly(stream, HEADER.size)
    length, tag = HEADER.unpack(header)
    if length < 1:
        raise ProtocolError("zero-length frame")
    if tag not in _KINDS:
        raise ProtocolError(f"unknown message tag {tag:#04x}")
    body = _read_exactly(stream, length - 1) if length > 1 else b""
    return _parse(tag, body)


class FrameDecoder:
    """Incremental decoder for one connection; feed bytes, get messages.

    Not thread-safe; use one instance per connection.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        buf = self._buf
        buf += data
        out = []
        pos = 0
        end = len(buf)
        while end - pos >= HEADER.size:
            length, tag = HEADER.unpack_from(buf, pos)
            if length < 1:
                raise ProtocolError("zero-length frame")
            if tag not in _KINDS:
                raise ProtocolError(f"unknown message tag {tag:#04x}")
            stop = pos + 4 + length
            if stop > end:
                break
            out.append(_parse(tag, bytes(buf[pos + HEADER.size:stop])))
            pos = stop
        if pos:
            del buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# Task records carried inside payloads


class DataKind(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class TaskStatus(str, enum.Enum):
    SUCCESS = "success"
    APP_FAILURE = "app_failure"
    SYSTEM_FAILURE = "system_failure"
    TIMEOUT = "timeout"
    LOST = "lost"


@dataclass
class DataRef:
    logical_name: str
    source_uri: str
    kind: DataKind = DataKind.DYNAMIC
    size_hint_bytes: Optional[int] = None

    def __post_init__(self):
        self.kind = DataKind(self.kind)
        if not self.logical_name or "/" in self.logical_name or self.logical_name in (".", ".."):
            raise ValueError(f"bad logical_name {self.logical_name!r}")
        if self.size_hint_bytes is not None and self.size_hint_bytes < 0:
            raise ValueError("size_hint_bytes must be non-negative")

    def to_dict(self):
        return {"logical_name": self.logical_name, "source_uri": self.source_uri,
                "kind": self.kind.value, "size_hint_bytes": self.size_hint_bytes}

    @classmethod
    def from_dict(cls, d):
        return cls(d["logical_name"], d["source_uri"], DataKind(d.get("kind", "dynamic")),
                   d.get("size_hint_bytes"))


@dataclass
class TaskDescriptor:
    task_id: str
    executable: str
    args: List[str] = field(default_factory=list)
    env: Dict[str, str] = field(default_factory=dict)
    static_inputs: List[DataRef] = field(default_factory=list)
    dynamic_inputs: List[DataRef] = field(default_factory=list)
    outputs: List[DataRef] = field(default_factory=list)
    wall_time_limit_s: int = 3600
    retries_remaining: int = 3
    capture_stdout: bool = False
    capture_stderr: bool = False

    def __post_init__(self):
        if not isinstance(self.task_id, str) or not self.task_id:
            raise ValueError("task_id must be a non-empty string")
        if "/" in self.task_id or self.task_id in (".", ".."):
            raise ValueError(f"task_id {self.task_id!r} cannot be used as a directory name")
        if not self.executable:
            raise ValueError(f"task {self.task_id}: executable must be non-empty")
        if (isinstance(self.wall_time_limit_s, bool) or not isinstance(self.wall_time_limit_s, int)
                or self.wall_time_limit_s <= 0):
            raise ValueError(f"task {self.task_id}: wall_time_limit_s must be a positive integer")
        if not isinstance(self.retries_remaining, int) or self.retries_remaining < 0:
            raise ValueError(f"task {self.task_id}: retries_remaining must be >= 0")
        names = [r.logical_name for r in self.static_inputs + self.dynamic_inputs + self.outputs]
        if len(names) != len(set(names)):
            raise ValueError(f"task {self.task_id}: duplicate logical_name")

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "executable": self.executable,
            "args": list(self.args),
            "env": dict(self.env),
            "static_inputs": [r.to_dict() for r in self.static_inputs],
            "dynamic_inputs": [r.to_dict() for r in self.dynamic_inputs],
            "outputs": [r.to_dict() for r in self.outputs],
            "wall_time_limit_s": self.wall_time_limit_s,
            "retries_remaining": self.retries_remaining,
            "capture_stdout": self.capture_stdout,
            "capture_stderr": self.capture_stderr,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown task fields: {', '.join(sorted(unknown))}")
        if "task_id" not in d or "executable" not in d:
            raise ValueError("task record needs task_id and executable")
        return cls(
            task_id=d["task_id"],
            executable=d["executable"],
            args=[str(a) for a in d.get("args", [])],
            env={str(k): str(v) for k, v in d.get("env", {}).items()},
            static_inputs=[DataRef.from_dict(r) for r in d.get("static_inputs", [])],
            dynamic_inputs=[DataRef.from_dict(r) for r in d.get("dynamic_inputs", [])],
            outputs=[DataRef.from_dict(r) for r in d.get("outputs", [])],
            wall_time_limit_s=d.get("wall_time_limit_s", 3600),
            retries_remaining=d.get("retries_remaining", 3),
            capture_stdout=bool(d.get("capture_stdout", False)),
            capture_stderr=bool(d.get("capture_stderr", False)),
        )


@dataclass
class TaskResult:
    """Outcome of one task attempt.

    Timestamps are milliseconds on the host's monotonic clock
    (``time.monotonic``), which Linux shares across processes; ``wall_ms``
    is the wall-clock completion time for log correlation.
    """

    task_id: str
    exit_code: int
    status: TaskStatus
    executor_id: str
    t_submitted: float
    t_dispatched: float
    t_started: float
    t_finished: float
    stdout_ref: Optional[DataRef] = None
    stderr_ref: Optional[DataRef] = None
    wall_ms: Optional[float] = None
    detail: str = ""

    def __post_init__(self):
        self.status = TaskStatus(self.status)

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "exit_code": self.exit_code,
            "status": self.status.value,
            "executor_id": self.executor_id,
            "t_submitted": self.t_submitted,
            "t_dispatched": self.t_dispatched,
            "t_started": self.t_started,
            "t_finished": self.t_finished,
            "stdout_ref": self.stdout_ref.to_dict() if self.stdout_ref else None,
            "stderr_ref": self.stderr_ref.to_dict() if self.stderr_ref else None,
            "wall_ms": self.wall_ms,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            task_id=d["task_id"],
            exit_code=d["exit_code"],
            status=TaskStatus(d["status"]),
            executor_id=d["executor_id"],
            t_submitted=d["t_submitted"],
            t_dispatched=d["t_dispatched"],
            t_started=d["t_started"],
            t_finished=d["t_finished"],
            stdout_ref=DataRef.from_dict(d["stdout_ref"]) if d.get("stdout_ref") else None,
            stderr_ref=DataRef.from_dict(d["stderr_ref"]) if d.get("stderr_ref") else None,
            wall_ms=d.get("wall_ms"),
            detail=d.get("detail", ""),
        )

    def check(self):
        """Raise ValueError if the timestamp chain or status/exit code disagree."""
        if not (self.t_submitted <= self.t_dispatched <= self.t_started <= self.t_finished):
            raise ValueError(f"{self.task_id}: timestamps out of order")
        if (self.status is TaskStatus.SUCCESS) != (self.exit_code == 0):
            raise ValueError(f"{self.task_id}: status {self.status.value} "
                             f"with exit code {self.exit_code}")


# Convenience constructors; keep payload layout in one place.

def register(slots, address, group=None, version=PROTOCOL_VERSION):
    return Message(Kind.REGISTER, {"version": version, "slots": slots,
                                   "address": address, "group": group})


def dispatch(task: TaskDescriptor, t_submitted, t_dispatched):
    return Message(Kind.TASK_DISPATCH, {"task": task.to_dict(), "t_submitted": t_submitted,
                                        "t_dispatched": t_dispatched})


def task_result(result: TaskResult):
    return Message(Kind.TASK_RESULT, {"result": result.to_dict()})


def result_notify(result: TaskResult):
    return Message(Kind.RESULT_NOTIFY, {"result": result.to_dict()})


def submit(tasks):
    return Message(Kind.SUBMIT, {"tasks": [t.to_dict() for t in tasks]})


def error(code, message):
    return Message(Kind.ERROR, {"code": code, "message": message})


def parse_address(text, default_host="127.0.0.1"):
    """``HOST:PORT`` -> ``(host, port)``."""
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return (host or default_host), int(port)
