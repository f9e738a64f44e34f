"""Attack execution engine and its HTTP service."""

from .engine import Engine, resolve_placeholders

__all__ = ["Engine", "resolve_placeholders"]
