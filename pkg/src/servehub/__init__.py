"""servehub: a self-hosted servable repository and serving platform."""

__version__ = "0.1.0"
