"""Few-shot dense prediction by matching visual tokens, at desk scale."""

__version__ = "0.1.0"
