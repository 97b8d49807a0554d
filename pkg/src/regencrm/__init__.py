"""Cooperative manipulators with regenerative semi-active joints."""

__version__ = "0.1.0"
