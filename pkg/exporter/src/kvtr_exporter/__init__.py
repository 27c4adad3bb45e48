"""Trace exporter: decoder-LLM attention states to KVTR files."""

from .export import ExportError, ExportSpec, export_trace
from .writer import write_trace

__version__ = "0.1.0"
