"""Vector-quantized subtractive-synthesis timbre auto-encoder."""
__version__ = "0.1.0"
