"""Multi-graph city embeddings for predicting urban economic growth."""

__version__ = "0.1.0"
