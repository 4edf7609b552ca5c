"""Online multi-cache prototype test-time adaptation over embedding streams."""

__version__ = "0.1.0"
