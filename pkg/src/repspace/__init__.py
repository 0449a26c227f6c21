"""Desk-scale contrastive representation learning and representation-space diagnostics."""

__version__ = "0.1.0"
