"""Layer-enriched Galerkin operator network package."""

__version__ = "1.0.0"
