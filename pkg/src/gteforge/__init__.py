"""Multi-stage contrastive training and evaluation of small text encoders."""

__version__ = "0.1.0"
