"""Constituency-tree GCN encoder and span-based semantic role labeling."""

__version__ = "0.1.0"
