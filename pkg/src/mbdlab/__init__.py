"""Model-based debiasing laboratory."""

__version__ = "0.1.0"
