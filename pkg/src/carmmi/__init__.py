"""Desk-scale conditional-autoregressive synthesis with an MMI auxiliary CTC recognizer."""

__version__ = "0.1.0"
