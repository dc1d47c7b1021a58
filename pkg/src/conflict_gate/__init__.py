"""Conflict-gated gradient scaling for SEIR physics-informed networks."""

__version__ = "0.1.0"
