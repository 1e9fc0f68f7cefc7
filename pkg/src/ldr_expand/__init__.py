"""Multi-stage chance-constrained generation and storage expansion with linear decision rules."""

__version__ = "0.1.0"
