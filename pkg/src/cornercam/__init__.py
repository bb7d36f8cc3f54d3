"""Edge-occluder non-line-of-sight imaging: simulation and reconstruction."""

__version__ = "0.1.0"
