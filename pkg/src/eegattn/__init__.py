"""Attention-based EEG optical-flow classification with adversarial encoder transfer."""

__version__ = "0.1.0"
