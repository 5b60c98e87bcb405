"""Multimodal speaker naming with convolutional face-audio networks."""
__version__ = "0.1.0"
