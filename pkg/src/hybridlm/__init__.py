"""Desk-scale decoder LM training harness with one-stage hybrid data mixing."""

__version__ = "0.1.0"
