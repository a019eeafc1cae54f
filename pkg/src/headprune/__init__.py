"""Attention-head importance, characterization and pruning on toy Transformers."""

__version__ = "0.1.0"
