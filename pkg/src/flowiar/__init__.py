"""Argmax-flow policies trained with invalid-action rejection actor-critic."""

__version__ = "0.1.0"
