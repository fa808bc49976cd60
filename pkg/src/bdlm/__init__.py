"""Dictionary-driven pretraining for low-resource translation, desk scale."""

__version__ = "0.1.0"
