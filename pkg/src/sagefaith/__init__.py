"""Faithfulness instrumentation for a toy multimodal transformer."""

__version__ = "0.1.0"
