"""Multi-scale, multimodal species distribution modelling on a small numpy core."""

__version__ = "0.1.0"
