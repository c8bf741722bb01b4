"""Learning pre-grasp poses around free-floating targets with soft actor-critic."""
from __future__ import annotations

__version__ = "0.1.0"
