"""Attention encoder-decoder ASR that decodes whole documents and learns from in-context examples."""

__version__ = "0.1.0"
