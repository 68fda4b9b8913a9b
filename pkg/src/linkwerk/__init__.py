"""linkwerk: privacy-preserving record linkage toolkit and fTTP simulator."""

__version__ = "0.1.0"
