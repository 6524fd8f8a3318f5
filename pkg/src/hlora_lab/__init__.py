"""Task-gated merged-expert low-rank adaptation inside a tiny unified vision-language model."""

__version__ = "0.1.0"
