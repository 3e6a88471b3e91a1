"""Differential-diagnosis toolkit: knowledge base, case simulator, rankers and evaluation."""

__version__ = "0.1.0"
