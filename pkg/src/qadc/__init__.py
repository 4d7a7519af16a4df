"""Region-conditioned QA and dense-caption generation with consistency filtering."""

__version__ = "0.1.0"
