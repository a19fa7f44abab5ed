"""a3d: a backend-independent logical optimizer for relational queries over
array-valued attributes."""

__version__ = "0.1.0"
