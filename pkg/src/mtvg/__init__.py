"""Multi-extractor temporal video grounding: feature fusion, 2D score maps,
moment-preserving cropping, ensembling and Recall@1 evaluation."""

from __future__ import annotations

__version__ = "0.1.0"
