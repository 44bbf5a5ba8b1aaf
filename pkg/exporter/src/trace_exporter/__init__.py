"""Offline trace exporter: teacher-forced per-position distributions from
transformers checkpoints, serialized into the grounded-decoding trace format."""

from .export import ExportError, ExportInput, ExportJob, export, load_inputs
from .format import TRACE_MAGIC, TRACE_VERSION, write_trace_file

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportInput",
    "ExportJob",
    "export",
    "load_inputs",
    "write_trace_file",
    "TRACE_MAGIC",
    "TRACE_VERSION",
    "__version__",
]
