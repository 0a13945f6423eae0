"""Sound event localization, detection and distance estimation from FOA audio."""

__version__ = "0.1.0"
