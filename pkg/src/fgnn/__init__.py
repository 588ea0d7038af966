"""Factor graph neural networks and max-product belief propagation."""

__version__ = "0.1.0"
