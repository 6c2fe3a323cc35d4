"""Attention trace exporter for small causal language models."""

__version__ = "0.1.0"
