"""DenseNet fruit-quality engine on NumPy."""
__version__ = "0.1.0"
