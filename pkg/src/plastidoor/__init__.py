"""Backdoor injection and plasticity interventions in deep RL, on a numpy engine."""

__version__ = "0.1.0"
