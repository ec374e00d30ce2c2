"""Online class-incremental learner: dynamic-preservation features, per-class
Gaussian mixtures fitted through the entropic OT dual, centroid-aware replay."""

__version__ = "0.1.0"
