"""Set prediction with a permutation-aware network trained by alternating assignment and Adam."""

__version__ = "0.1.0"
