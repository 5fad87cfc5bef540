"""Desk-scale unified vision-language model: QA by next-token prediction,
image synthesis by rectified flow, one shared causal transformer."""

__version__ = "0.1.0"
