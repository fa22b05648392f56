"""Support-set cross-supervision objectives for temporal video grounding."""

__version__ = "0.1.0"
