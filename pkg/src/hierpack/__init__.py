"""Hierarchical temporal-graph multi-task learning with a prototype backpack."""

__version__ = "0.1.0"
