"""Whole-slide H&E molecular subtyping pipeline.

Stages: tile extraction, stain normalization against a cohort reference,
external tile scoring over a line protocol, per-classifier thresholding,
count-feature aggregation, boosted-tree slide classification, evaluation
with bootstrap intervals, and tumor-probability heatmaps.
"""

__version__ = "0.1.0"

CLASS_ORDER = ("LumA", "LumB", "HER2", "Basal")

TUMOR_CLASSIFIER = "tumor"
