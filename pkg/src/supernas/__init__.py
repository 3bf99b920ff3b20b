"""supernas: weight-sharing supernet training and constrained architecture search."""

__version__ = "0.1.0"
