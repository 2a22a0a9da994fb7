"""Language-directed grid navigation with guided feature transformation."""

__version__ = "0.1.0"
