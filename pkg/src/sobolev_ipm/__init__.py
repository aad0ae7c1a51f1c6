"""Sobolev and Fisher integral probability metrics: closed forms, PDE critics,
particle descent, and augmented-Lagrangian adversarial training."""

__version__ = "0.1.0"
