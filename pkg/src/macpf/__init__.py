"""Conditional factorized soft policies for cooperative multi-agent learning."""

__version__ = "0.1.0"
