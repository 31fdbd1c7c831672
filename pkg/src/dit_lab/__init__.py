"""Training-data influence over time windows of an SGD run."""

__version__ = "0.1.0"
