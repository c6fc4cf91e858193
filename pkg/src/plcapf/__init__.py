"""Particle filtering for shift-invariant PLCA transcription."""

__version__ = "0.1.0"
