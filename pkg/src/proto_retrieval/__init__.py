"""Prototypical partially relevant video retrieval."""
