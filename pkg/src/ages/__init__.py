"""Bidirectional generative modeling with adversarial gradient estimation of f-divergences."""

__version__ = "0.1.0"
