"""Desk-scale lab for asymmetric source/target contrastive learning."""

__version__ = "0.1.0"
