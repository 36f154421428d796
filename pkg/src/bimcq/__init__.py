"""Bi-directional multiple-choice fine-tuning for negation-aware vision-language alignment."""

__version__ = "0.1.0"
