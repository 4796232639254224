"""Multi-scale graph neural operator for PDE surrogates on 2-D point clouds."""

__version__ = "0.1.0"
