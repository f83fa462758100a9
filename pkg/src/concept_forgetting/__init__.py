"""Concept-level forgetting analysis with task-anchored sparse autoencoders."""

__version__ = "0.1.0"
