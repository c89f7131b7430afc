"""Recurrent flow-aligned video super-resolution with temporal and dual-space adversarial objectives."""

__version__ = "0.1.0"
