"""Desk-scale human-in-the-loop post-training stack for an arm-hand system."""

__version__ = "0.1.0"
