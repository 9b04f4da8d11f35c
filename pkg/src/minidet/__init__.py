"""minidet: desk-scale two-stage detector testbed with backdoor attack/defense tooling."""

__version__ = "0.1.0"
