"""Multi-band multi-resolution fully convolutional singing-voice separation, built on numpy."""

__version__ = "0.1.0"
