"""Book-data trend classification and label-driven portfolio toolkit."""

__version__ = "0.1.0"
