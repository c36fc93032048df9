"""Streaming retrieval injection for a full-duplex speech front end, simulated at the token level."""

__version__ = "0.1.0"
