"""Core domain: CoNLL-U ingestion, dependency graphs, tensors, model, probe and training."""

__version__ = "0.1.0"
