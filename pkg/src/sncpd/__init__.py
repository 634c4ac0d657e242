"""Change-point detection with spectrally normalized self-supervised encoders."""

__version__ = "0.1.0"
