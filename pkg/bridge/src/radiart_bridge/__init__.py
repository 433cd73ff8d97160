"""radiart_bridge: encoder service for the stylization engine."""

__version__ = "0.1.0"
