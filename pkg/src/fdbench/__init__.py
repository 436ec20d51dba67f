"""Observer-based fault detection with certified invariant-set monitoring."""

__version__ = "0.1.0"
