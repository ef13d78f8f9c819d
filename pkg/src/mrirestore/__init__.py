"""MRI super-resolution and motion-artifact reduction with edge, structure and texture losses."""

__version__ = "0.1.0"
