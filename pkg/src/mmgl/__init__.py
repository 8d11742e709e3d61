"""Multi-modal graph learning: attention-based feature fusion, adaptive graph
structure learning, and a jointly trained GCN classifier."""

__version__ = "0.1.0"

from . import agl, data, gcn, maff, numcore, train  # noqa: F401
