"""Recurrent-network training with interchangeable temporal-gradient engines."""

__version__ = "0.1.0"
