"""Desk-scale many-task computing: a dispatcher, executors, a load-balancing
client, a pset provisioner and the benchmarks that measure them."""

from .protocol import (DataKind, DataRef, Kind, Message, ProtocolError, TaskDescriptor,
                       TaskResult, TaskStatus)

__version__ = "0.1.0"

__all__ = ["DataKind", "DataRef", "Kind", "Message", "ProtocolError", "TaskDescriptor",
           "TaskResult", "TaskStatus", "__version__"]
