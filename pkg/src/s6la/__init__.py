"""Selective state space layer aggregation for CNN and transformer stacks."""

__version__ = "0.1.0"
