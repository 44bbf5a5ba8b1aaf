"""Backends: replayable traces, the deterministic toy model, and the HTTP
logit-server client."""

from .base import Backend, BackendCapabilities, BackendError, TraceMissError
from .http import HttpBackend
from .toy import ToyBackend, ToyModelSpec, load_toy_spec
from .trace import (
    DEFAULT_TOP_M,
    TraceBackend,
    TraceRecord,
    TraceSession,
    load_trace,
    read_trace,
    write_trace,
)

__all__ = [
    "Backend",
    "BackendCapabilities",
    "BackendError",
    "TraceMissError",
    "HttpBackend",
    "ToyBackend",
    "ToyModelSpec",
    "load_toy_spec",
    "TraceBackend",
    "TraceRecord",
    "TraceSession",
    "load_trace",
    "read_trace",
    "write_trace",
    "DEFAULT_TOP_M",
]
