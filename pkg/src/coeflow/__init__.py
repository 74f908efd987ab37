"""Modeling toolkit for streaming-dataflow accelerators serving compositions of experts."""

__version__ = "0.1.0"
