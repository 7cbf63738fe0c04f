"""Template-based face verification core: alignment, landmarking,
descriptors, triplet embedding and protocol evaluation."""

__version__ = "0.1.0"
