"""Property-inference-attack laboratory for convolutional classifiers."""

__version__ = "0.1.0"
