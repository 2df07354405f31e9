"""Two-modality swapped-prediction clustering with equipartitioned codes."""

__version__ = "0.1.0"
