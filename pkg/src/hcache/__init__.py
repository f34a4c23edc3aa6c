"""Hidden-state based KV-cache restoration for LLM serving, at desk scale."""

__version__ = "0.1.0"
