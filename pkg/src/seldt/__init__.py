"""Sound event localization and tracking with MUSIC and an RBMCDA particle filter."""

__version__ = "0.1.0"
