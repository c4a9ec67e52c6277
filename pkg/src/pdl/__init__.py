"""Category-level 6D pose estimation with a regression prior and a guided score model."""

__version__ = "0.1.0"
