"""Toy-scale multilingual re-alignment of a query-token image encoder to a causal LM."""

__version__ = "0.1.0"
