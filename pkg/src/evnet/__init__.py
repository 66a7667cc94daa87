"""Event neural network inference: dense and sparse delta execution with operation accounting."""

__version__ = "0.1.0"
