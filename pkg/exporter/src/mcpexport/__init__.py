"""Offline image-folder-to-embedding-stream exporter."""

__version__ = "0.1.0"
