"""Evolutionary discovery of compact radiomic sequencers"""

__version__ = "0.1.0"
