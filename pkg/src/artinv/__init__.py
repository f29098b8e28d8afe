"""Speaker-independent acoustic-to-articulatory inversion toolkit."""

__version__ = "0.1.0"
