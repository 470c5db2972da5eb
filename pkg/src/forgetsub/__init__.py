"""Validation-subset selection for forgetting-aware ASR personalization."""

__version__ = "0.1.0"
