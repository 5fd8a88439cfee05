"""Training-free merging of heterogeneous GNN specialists."""

__version__ = "0.1.0"
