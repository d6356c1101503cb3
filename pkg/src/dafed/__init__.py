"""Federated domain-adversarial learning on functional-connectivity graphs."""

__version__ = "0.1.0"
