"""Obfuscation and analysis workbench for BEAM assembly."""

__version__ = "0.1.0"
