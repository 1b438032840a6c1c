"""Span-based targeted sentiment analysis: extract opinion targets, then classify their polarity."""

__version__ = "0.1.0"
