"""Edge-cloud application orchestration on a deterministic simulated substrate."""

__version__ = "0.1.0"
