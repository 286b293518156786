"""Recursive, reversibly-gated instance segmentation on synthetic shapes."""

__version__ = "0.1.0"
