"""Virtual in-hand view rendering and multi-stage action refinement."""

__version__ = "0.1.0"
