"""Long-horizon frame generation with rectified flow on a synthetic multi-view world."""

__version__ = "0.1.0"
