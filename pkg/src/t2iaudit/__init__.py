"""Grey-box audit harness for text-to-image model backends."""

__version__ = "0.1.0"
