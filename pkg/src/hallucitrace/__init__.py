"""Causal tracing, logit-lens inspection and mitigation of factual errors in a toy transformer."""

__version__ = "0.1.0"
