"""Real-options thresholds for a start-up: incubation, entry, and abandonment before and after competition."""

__all__ = ["__version__"]
__version__ = "0.1.0"
