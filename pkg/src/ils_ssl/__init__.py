"""Masked-prediction speech pre-training with intermediate layer supervision, at desk scale."""

__version__ = "0.1.0"
