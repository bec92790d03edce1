"""Self-supervised pretext tasks for GCN node classification."""

__version__ = "0.1.0"
