"""Next-POI recommendation with semantic, social and geographical context."""

__version__ = "0.1.0"
