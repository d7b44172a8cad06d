"""Multimodal pass success/failure classification with two-stage gradient
explanations, a synthetic-scenario oracle, and a what-if inference service."""

__version__ = "0.1.0"
