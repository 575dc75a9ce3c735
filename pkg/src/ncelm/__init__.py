"""Word-level neural language model training with NCE-family output heads."""

__version__ = "0.1.0"
